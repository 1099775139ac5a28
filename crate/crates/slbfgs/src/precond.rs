//! Bias-corrected ADAM moments used as the initial scaling `H0`.
//!
//! Each optimizer step feeds the raw batch gradient through
//! [`AdamState::update`], obtaining the bias-corrected first moment `m_hat`
//! (which replaces the gradient in the two-loop recursion) and second moment
//! `v_hat` (which defines the diagonal scaling `H0 = diag(1/(sqrt(v_hat) +
//! 1e-8))`). With an empty pair memory the resulting step is exactly
//! `-alpha * m_hat / (sqrt(v_hat) + 1e-8)`, i.e. plain ADAM.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::two_loop::InitialScale;

/// Stabilizer added to `sqrt(v_hat)` in the diagonal scaling.
pub const H0_STABILIZER: f64 = 1e-8;

/// Default exponential-decay rate for the first moment.
pub const DEFAULT_BETA1: f64 = 0.9;

/// Default exponential-decay rate for the second moment.
pub const DEFAULT_BETA2: f64 = 0.999;

/// Exponential moving averages of the gradient and its square.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array1<f64>,
    v: Array1<f64>,
    beta1: f64,
    beta2: f64,
    /// Number of updates applied so far.
    step: u64,
}

impl AdamState {
    /// Fresh zero state for dimension `d`. Betas must lie in `[0, 1)`.
    pub fn new(d: usize, beta1: f64, beta2: f64) -> Result<Self> {
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        Ok(AdamState {
            m: Array1::zeros(d),
            v: Array1::zeros(d),
            beta1,
            beta2,
            step: 0,
        })
    }

    /// Fresh state with the default betas.
    pub fn with_defaults(d: usize) -> Self {
        AdamState::new(d, DEFAULT_BETA1, DEFAULT_BETA2).expect("default betas are valid")
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Fold one gradient into the moments and return the bias-corrected
    /// `(m_hat, v_hat)`.
    ///
    /// `m <- beta1 m + (1 - beta1) g`, `v <- beta2 v + (1 - beta2) g^2`,
    /// then `m_hat = m / (1 - beta1^k)`, `v_hat = v / (1 - beta2^k)` with `k`
    /// the post-increment step count. The first update returns `m_hat = g`
    /// and `v_hat = g^2` up to rounding (the corrections cancel); with both
    /// betas zero the state is memoryless and the identity is exact.
    pub fn update(&mut self, g: &Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        if g.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: g.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::ContractViolation(
                "non-finite gradient fed to ADAM update".into(),
            ));
        }
        self.step += 1;
        for i in 0..self.m.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
        }
        // beta^k via powf; exact at k = 1 and immune to exponent overflow.
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        let m_hat = &self.m / c1;
        let v_hat = &self.v / c2;
        Ok((m_hat, v_hat))
    }
}

/// Apply the diagonal scaling `q / (sqrt(v_hat) + 1e-8)` elementwise.
///
/// Computed as multiplication by the reciprocal so it is bit-identical to
/// routing [`scale_from_v_hat`] through the two-loop recursion.
pub fn h0_apply(v_hat: &Array1<f64>, q: &Array1<f64>) -> Result<Array1<f64>> {
    if v_hat.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: v_hat.len(),
            got: q.len(),
        });
    }
    Ok(Array1::from_iter(
        v_hat
            .iter()
            .zip(q.iter())
            .map(|(v, q)| (1.0 / (v.sqrt() + H0_STABILIZER)) * q),
    ))
}

/// The diagonal initial scaling induced by `v_hat`.
pub fn scale_from_v_hat(v_hat: &Array1<f64>) -> Result<InitialScale> {
    if v_hat.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::ContractViolation(
            "second moment must be nonnegative and finite".into(),
        ));
    }
    InitialScale::diagonal(v_hat.mapv(|v| 1.0 / (v.sqrt() + H0_STABILIZER)))
}
