//! Linear least squares: `f_i(w) = 1/2 (a_i'w - b_i)^2 + reg/2 |w|^2`.
//!
//! The loss is quadratic, so the Hessian `(1/|S|) sum a_i a_i' + reg I` is
//! constant in `w` and equals the Gauss-Newton matrix exactly. This is the
//! cheapest oracle and the one with a closed-form minimizer, which makes it
//! the natural fixture for convergence checks.

use ndarray::Array1;

use super::{BatchSpec, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LeastSquaresProblem {
    data: Dataset,
    reg: f64,
}

impl LeastSquaresProblem {
    pub fn new(data: Dataset, reg: f64) -> Result<Self> {
        if reg < 0.0 || !reg.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "regularization must be a finite nonnegative value, got {reg}"
            )));
        }
        Ok(LeastSquaresProblem { data, reg })
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
            let r = self.data.row_dot(i, w) - self.data.label(i);
            acc += 0.5 * r * r;
        }
        Ok(acc / batch.len() as f64 + 0.5 * self.reg * w.dot(w))
    }

    pub(super) fn batch_gradient(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<Array1<f64>> {
        let mut grad = w * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let r = self.data.row_dot(i, w) - self.data.label(i);
            self.data.add_row_scaled(i, coef * r, &mut grad);
        }
        Ok(grad)
    }

    pub(super) fn hessian_vec(
        &self,
        _w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let mut out = v * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let av = self.data.row_dot(i, v);
            self.data.add_row_scaled(i, coef * av, &mut out);
        }
        Ok(out)
    }

    pub(super) fn ggn_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        // l''(z) = 1 for the squared loss, so the Jacobian sandwich reduces
        // to the Hessian route with unit curvature weights.
        self.hessian_vec(w, batch, v)
    }

    /// Mean squared residual on a held-out set (no regularization term).
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
        let mut acc = 0.0;
        for i in 0..data.n() {
            let r = data.row_dot(i, w) - data.label(i);
            acc += r * r;
        }
        Ok(acc / data.n() as f64)
    }
}
