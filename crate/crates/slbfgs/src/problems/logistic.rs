//! Binary logistic regression with labels in `{-1, +1}`.
//!
//! `f_i(w) = ln(1 + exp(-b_i a_i'w)) + reg/2 |w|^2`. The predictor is
//! linear, so the Gauss-Newton matrix coincides with the Hessian; both are
//! implemented as separate passes and cross-checked in the tests.

use ndarray::Array1;

use super::{BatchSpec, Dataset};
use crate::error::{Error, Result};

/// `ln(1 + exp(-z))` without overflow for large `|z|`.
fn log1p_exp_neg(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Logistic sigmoid, saturating stably.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct LogisticProblem {
    data: Dataset,
    reg: f64,
}

impl LogisticProblem {
    /// `reg` is the L2 coefficient on each component (`>= 0`); labels must
    /// all be `+-1`.
    pub fn new(data: Dataset, reg: f64) -> Result<Self> {
        if reg < 0.0 || !reg.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "regularization must be a finite nonnegative value, got {reg}"
            )));
        }
        for (i, &label) in data.labels().iter().enumerate() {
            if label != 1.0 && label != -1.0 {
                return Err(Error::InvalidConfig(format!(
                    "logistic label at row {i} must be +-1, got {label}"
                )));
            }
        }
        Ok(LogisticProblem { data, reg })
    }

    /// The conventional default coupling `reg = 1/n`.
    pub fn with_default_regularization(data: Dataset) -> Result<Self> {
        let reg = 1.0 / data.n() as f64;
        LogisticProblem::new(data, reg)
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn regularization(&self) -> f64 {
        self.reg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub(super) fn batch_loss(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<f64> {
        let mut acc = 0.0;
        for &i in batch.indices() {
            let margin = self.data.label(i) * self.data.row_dot(i, w);
            acc += log1p_exp_neg(margin);
        }
        Ok(acc / batch.len() as f64 + 0.5 * self.reg * w.dot(w))
    }

    pub(super) fn batch_gradient(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<Array1<f64>> {
        let mut grad = w * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let b = self.data.label(i);
            let margin = b * self.data.row_dot(i, w);
            // d/dz ln(1+exp(-b z)) = -b sigma(-b z)
            self.data
                .add_row_scaled(i, -coef * b * sigmoid(-margin), &mut grad);
        }
        Ok(grad)
    }

    pub(super) fn hessian_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let mut out = v * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let p = sigmoid(self.data.row_dot(i, w));
            let weight = p * (1.0 - p); // independent of the +-1 label
            let av = self.data.row_dot(i, v);
            self.data.add_row_scaled(i, coef * weight * av, &mut out);
        }
        Ok(out)
    }

    pub(super) fn ggn_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        // J' L'' J v with the scalar predictor z = a'w: forward products
        // u_i = a_i'v, curvature weights l''(z_i) = sigma(z)sigma(-z), then
        // the transposed-Jacobian accumulation. Coincides with the exact
        // Hessian because the predictor is linear.
        let mut out = v * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let z = self.data.row_dot(i, w);
            let lpp = sigmoid(z) * sigmoid(-z);
            let u = self.data.row_dot(i, v);
            self.data.add_row_scaled(i, coef * lpp * u, &mut out);
        }
        Ok(out)
    }

    pub(super) fn eval_error(&self, w: &Array1<f64>, data: &Dataset) -> Result<f64> {
        if data.dim() > self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        if data.n() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut wrong = 0usize;
        for i in 0..data.n() {
            let predicted = if data.row_dot(i, w) >= 0.0 { 1.0 } else { -1.0 };
            if predicted != data.label(i) {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / data.n() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{synth_dataset, ProblemOracle, SynthKind};
    use super::*;
    use ndarray::array;

    fn toy() -> LogisticProblem {
        let data = Dataset::new(
            vec![
                vec![(0, 1.0), (1, 2.0)],
                vec![(0, -0.5)],
                vec![(1, 1.5)],
            ],
            vec![1.0, -1.0, 1.0],
            2,
        )
        .unwrap();
        LogisticProblem::new(data, 0.0).unwrap()
    }

    #[test]
    fn loss_at_zero_is_ln_two() {
        let p = toy();
        let full = BatchSpec::full(3);
        let loss = p.batch_loss(&array![0.0, 0.0], &full).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn labels_must_be_signs() {
        let data = Dataset::new(vec![vec![(0, 1.0)]], vec![0.5], 1).unwrap();
        assert!(LogisticProblem::new(data, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = toy();
        let full = BatchSpec::full(3);
        let w = array![0.3, -0.7];
        let g = p.batch_gradient(&w, &full).unwrap();
        let eps = 1e-6;
        for j in 0..2 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += eps;
            wm[j] -= eps;
            let fd = (p.batch_loss(&wp, &full).unwrap() - p.batch_loss(&wm, &full).unwrap())
                / (2.0 * eps);
            assert!((g[j] - fd).abs() < 1e-8, "coordinate {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn stable_at_extreme_margins() {
        let p = toy();
        let full = BatchSpec::full(3);
        let w = array![500.0, -500.0];
        let loss = p.batch_loss(&w, &full).unwrap();
        let grad = p.batch_gradient(&w, &full).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn perfect_separator_has_zero_error() {
        let synth = synth_dataset(SynthKind::Logistic, 40, 5, 11, 0.0).unwrap();
        let w = synth.planted.row(0).to_owned();
        let oracle = ProblemOracle::Logistic(
            LogisticProblem::new(synth.dataset.clone(), 0.0).unwrap(),
        );
        assert_eq!(oracle.eval_error(&w, &synth.dataset).unwrap(), 0.0);
    }
}
