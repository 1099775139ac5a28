//! Stochastic L-BFGS for finite-sum problems.
//!
//! The central idea implemented here is to stabilize stochastic L-BFGS by
//! replacing the usual gradient-difference curvature pairs with products of a
//! subsampled curvature matrix and the step: `y_k = B(w_k; S_k) * s_k`, where
//! `B` is either the batch Hessian (`LBFGS-H`) or a generalized Gauss-Newton /
//! Fisher matrix (`LBFGS-F`). Pairs pass a cautious acceptance test
//! `y's >= eps * |s|^2`, the initial scaling `H0` is the diagonal ADAM
//! preconditioner (so zero memory recovers ADAM exactly), and the two-loop
//! recursion has a vector-free formulation whose per-iteration communication
//! in a data-parallel setting is `O(d log tau + m^2)` scalars.
//!
//! Module map:
//! - [`curvature`]: bounded pair memory with the cautious acceptance rule.
//! - [`two_loop`]: classic and vector-free two-loop recursions.
//! - [`precond`]: bias-corrected ADAM moments and the diagonal `H0`.
//! - [`problems`]: logistic / least-squares / MLP oracles, datasets, batching.
//! - [`optimizer`]: the step rule, baselines, and epoch-level run records.
//! - [`distributed`]: simulated data-parallel execution with an exact
//!   communication ledger.
//! - [`theory`]: dense reference constructions and numerical checks of the
//!   convergence-analysis quantities (eigenvalue ranges, variance bounds,
//!   plateau behaviour).

pub mod curvature;
pub mod distributed;
pub mod error;
pub mod linalg;
pub mod optimizer;
pub mod precond;
pub mod problems;
pub mod theory;
pub mod two_loop;

pub use error::{Error, Result};
