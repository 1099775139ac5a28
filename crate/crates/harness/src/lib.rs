//! Benchmark harness around the `slbfgs` crate.
//!
//! The harness turns a declarative experiment description (a TOML document)
//! into reproducible optimizer runs: it builds the problem oracle, computes a
//! high-precision reference solution for the suboptimality axis, sweeps the
//! optimizer grid in parallel, and writes one CSV or JSON record per
//! `(variant, alpha, batch, memory, seed)` cell plus per-cell min/mean/max
//! aggregates. A separate battery of desk-scale checks confirms the
//! convergence-analysis quantities (variance factors, eigenvalue envelopes,
//! curvature-pair ratios) on the configured problem.
//!
//! Module map:
//! - [`config`]: the experiment document, its defaults, and validation.
//! - [`problem`]: oracle construction and train/test splitting.
//! - [`reference`]: the near-exact minimizer used for suboptimality curves.
//! - [`experiment`]: grid execution and the output writers.
//! - [`theory_report`]: the numeric check battery behind `check-theory`.
//! - [`selftest`]: a fast end-to-end invariant sweep behind `selftest`.

pub mod config;
pub mod experiment;
pub mod problem;
pub mod reference;
pub mod selftest;
pub mod theory_report;
