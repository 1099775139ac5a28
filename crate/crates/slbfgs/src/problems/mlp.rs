//! Softmax cross-entropy classifier, optionally with one tanh hidden layer.
//!
//! Parameters live in one flat vector: `[W1 (h x din, row-major), c1 (h),
//! W2 (K x h), c2 (K)]`, or `[W (K x din), c (K)]` when `hidden == 0`. The
//! Hessian product is an exact forward-over-reverse sweep; the Gauss-Newton
//! product composes a Jacobian-vector product to the logits, the loss
//! curvature in the middle, and a transposed-Jacobian product back. With no
//! hidden layer the two coincide, which the tests pin down.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::{BatchSpec, Dataset};
use crate::error::{Error, Result};

/// Hidden width used when a configuration does not choose one.
pub const DEFAULT_HIDDEN_WIDTH: usize = 32;

/// Which curvature sits between the Jacobian products in `ggn_vec`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GgnForm {
    /// Loss Hessian w.r.t. the logits, `diag(p) - p p'`. Exact Gauss-Newton
    /// for the softmax-composed loss; not diagonal, so the sharded product
    /// path does not accept it.
    #[default]
    Softmax,
    /// Diagonal curvature `diag(t_k / p_k^2)` w.r.t. the probability
    /// outputs, with the softmax Jacobian folded into both Jacobian factors.
    DiagonalProbability,
}

/// `out_r = sum_c w[off + r*cols + c] * x_c` for a matrix stored row-major
/// inside a flat parameter vector.
fn matvec(w: &Array1<f64>, off: usize, rows: usize, cols: usize, x: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(rows);
    for r in 0..rows {
        let base = off + r * cols;
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w[base + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// Transposed counterpart: `out_c = sum_r w[off + r*cols + c] * y_r`.
fn matvec_t(w: &Array1<f64>, off: usize, rows: usize, cols: usize, y: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(cols);
    for r in 0..rows {
        let base = off + r * cols;
        let yr = y[r];
        for c in 0..cols {
            out[c] += w[base + c] * yr;
        }
    }
    out
}

fn log_sum_exp(z: &Array1<f64>) -> f64 {
    let zmax = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    zmax + z.mapv(|v| (v - zmax).exp()).sum().ln()
}

fn class_label(raw: f64, classes: usize, row: usize) -> Result<usize> {
    if !raw.is_finite() || raw.fract() != 0.0 || raw < 0.0 || raw >= classes as f64 {
        return Err(Error::InvalidConfig(format!(
            "class label at row {row} must be an integer in [0, {classes}), got {raw}"
        )));
    }
    Ok(raw as usize)
}

#[derive(Debug, Clone)]
pub struct MlpProblem {
    /// Densified feature matrix, one row per sample.
    xs: Array2<f64>,
    /// Class labels in `0..classes`.
    ts: Vec<usize>,
    din: usize,
    hidden: usize,
    classes: usize,
    reg: f64,
    form: GgnForm,
}

impl MlpProblem {
    /// `hidden == 0` drops the hidden layer entirely (a linear softmax
    /// classifier); labels must be integers in `[0, classes)`.
    pub fn new(data: Dataset, reg: f64, hidden: usize, classes: usize, form: GgnForm) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "softmax needs at least 2 classes, got {classes}"
            )));
        }
        if reg < 0.0 || !reg.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "regularization must be a finite nonnegative value, got {reg}"
            )));
        }
        let mut ts = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            ts.push(class_label(data.label(i), classes, i)?);
        }
        Ok(MlpProblem {
            xs: data.to_dense(),
            ts,
            din: data.dim(),
            hidden,
            classes,
            reg,
            form,
        })
    }

    /// Total parameter count.
    pub fn dim(&self) -> usize {
        let (din, h, k) = (self.din, self.hidden, self.classes);
        if h == 0 {
            k * din + k
        } else {
            h * din + h + k * h + k
        }
    }

    pub fn n(&self) -> usize {
        self.ts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.din
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn regularization(&self) -> f64 {
        self.reg
    }

    pub fn ggn_form(&self) -> GgnForm {
        self.form
    }

    /// True when there is no hidden layer, i.e. the objective is convex.
    pub fn is_linear(&self) -> bool {
        self.hidden == 0
    }

    fn off_c1(&self) -> usize {
        self.hidden * self.din
    }

    fn off_w2(&self) -> usize {
        self.hidden * self.din + self.hidden
    }

    fn off_c2(&self) -> usize {
        self.off_w2() + self.classes * self.hidden
    }

    /// Gaussian weights with std `1/sqrt(fan_in)` per layer, zero biases.
    pub fn gaussian_init(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (din, h, k) = (self.din, self.hidden, self.classes);
        let mut w = Array1::zeros(self.dim());
        if h == 0 {
            let std = 1.0 / (din as f64).sqrt();
            for idx in 0..k * din {
                w[idx] = std * rng.sample::<f64, _>(StandardNormal);
            }
        } else {
            let std1 = 1.0 / (din as f64).sqrt();
            for idx in 0..h * din {
                w[idx] = std1 * rng.sample::<f64, _>(StandardNormal);
            }
            let std2 = 1.0 / (h as f64).sqrt();
            for idx in 0..k * h {
                w[self.off_w2() + idx] = std2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        w
    }

    /// Forward pass to the logits; also returns the hidden activations when
    /// a hidden layer exists.
    fn logits_at(&self, w: &Array1<f64>, x: ArrayView1<f64>) -> (Array1<f64>, Option<Array1<f64>>) {
        let (din, h, k) = (self.din, self.hidden, self.classes);
        if h == 0 {
            let mut z = matvec(w, 0, k, din, x);
            for c in 0..k {
                z[c] += w[k * din + c];
            }
            (z, None)
        } else {
            let mut u = matvec(w, 0, h, din, x);
            for j in 0..h {
                u[j] += w[self.off_c1() + j];
            }
            let z1 = u.mapv(f64::tanh);
            let mut z = matvec(w, self.off_w2(), k, h, z1.view());
            for c in 0..k {
                z[c] += w[self.off_c2() + c];
            }
            (z, Some(z1))
        }
    }

    fn logits(&self, w: &Array1<f64>, i: usize) -> (Array1<f64>, Option<Array1<f64>>) {
        self.logits_at(w, self.xs.row(i))
    }

    /// Backpropagate a logit-space vector `dz` into `out += coef * J' dz`.
    fn accumulate_vjp(
        &self,
        w: &Array1<f64>,
        i: usize,
        z1: Option<&Array1<f64>>,
        dz: &Array1<f64>,
        coef: f64,
        out: &mut Array1<f64>,
    ) {
        let x = self.xs.row(i);
        let (din, h, k) = (self.din, self.hidden, self.classes);
        match z1 {
            None => {
                for c in 0..k {
                    let g = coef * dz[c];
                    let base = c * din;
                    for j in 0..din {
                        out[base + j] += g * x[j];
                    }
                    out[k * din + c] += g;
                }
            }
            Some(z1) => {
                for c in 0..k {
                    let g = coef * dz[c];
                    let base = self.off_w2() + c * h;
                    for j in 0..h {
                        out[base + j] += g * z1[j];
                    }
                    out[self.off_c2() + c] += g;
                }
                let dz1 = matvec_t(w, self.off_w2(), k, h, dz);
                for j in 0..h {
                    let du = coef * dz1[j] * (1.0 - z1[j] * z1[j]);
                    let base = j * din;
                    for l in 0..din {
                        out[base + l] += du * x[l];
                    }
                    out[self.off_c1() + j] += du;
                }
            }
        }
    }

    /// Forward-mode sweep to the logits: `Rz = J v`.
    fn jvp_logits(
        &self,
        w: &Array1<f64>,
        v: &Array1<f64>,
        i: usize,
        z1: Option<&Array1<f64>>,
    ) -> Array1<f64> {
        let x = self.xs.row(i);
        let (din, h, k) = (self.din, self.hidden, self.classes);
        match z1 {
            None => {
                let mut rz = matvec(v, 0, k, din, x);
                for c in 0..k {
                    rz[c] += v[k * din + c];
                }
                rz
            }
            Some(z1) => {
                let mut ru = matvec(v, 0, h, din, x);
                for j in 0..h {
                    ru[j] += v[self.off_c1() + j];
                }
                let rz1: Array1<f64> =
                    (0..h).map(|j| (1.0 - z1[j] * z1[j]) * ru[j]).collect();
                let mut rz = matvec(v, self.off_w2(), k, h, z1.view());
                let w2rz1 = matvec(w, self.off_w2(), k, h, rz1.view());
                for c in 0..k {
                    rz[c] += w2rz1[c] + v[self.off_c2() + c];
                }
                rz
            }
        }
    }

    pub(super) fn batch_loss(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<f64> {
        let mut acc = 0.0;
        for &i in batch.indices() {
            let (z, _) = self.logits(w, i);
            acc += log_sum_exp(&z) - z[self.ts[i]];
        }
        Ok(acc / batch.len() as f64 + 0.5 * self.reg * w.dot(w))
    }

    pub(super) fn batch_gradient(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<Array1<f64>> {
        let mut grad = w * self.reg;
        let coef = 1.0 / batch.len() as f64;
        for &i in batch.indices() {
            let (z, z1) = self.logits(w, i);
            let lse = log_sum_exp(&z);
            let mut dz = z.mapv(|val| (val - lse).exp());
            dz[self.ts[i]] -= 1.0;
            self.accumulate_vjp(w, i, z1.as_ref(), &dz, coef, &mut grad);
        }
        Ok(grad)
    }

    /// Exact Hessian-vector product via a forward-over-reverse sweep,
    /// including the second-order terms of the tanh layer.
    pub(super) fn hessian_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let mut out = v * self.reg;
        let coef = 1.0 / batch.len() as f64;
        let (din, h, k) = (self.din, self.hidden, self.classes);
        for &i in batch.indices() {
            let x = self.xs.row(i);
            let t = self.ts[i];
            let (z, z1) = self.logits(w, i);
            let lse = log_sum_exp(&z);
            let p = z.mapv(|val| (val - lse).exp());
            if h == 0 {
                let mut rz = matvec(v, 0, k, din, x);
                for c in 0..k {
                    rz[c] += v[k * din + c];
                }
                let prz = p.dot(&rz);
                for c in 0..k {
                    let rdz = p[c] * (rz[c] - prz);
                    let g = coef * rdz;
                    let base = c * din;
                    for j in 0..din {
                        out[base + j] += g * x[j];
                    }
                    out[k * din + c] += g;
                }
            } else {
                let z1 = z1.expect("hidden layer activations");
                let mut dz = p.clone();
                dz[t] -= 1.0;
                // forward-mode quantities along v
                let mut ru = matvec(v, 0, h, din, x);
                for j in 0..h {
                    ru[j] += v[self.off_c1() + j];
                }
                let rz1: Array1<f64> =
                    (0..h).map(|j| (1.0 - z1[j] * z1[j]) * ru[j]).collect();
                let mut rz = matvec(v, self.off_w2(), k, h, z1.view());
                let w2rz1 = matvec(w, self.off_w2(), k, h, rz1.view());
                for c in 0..k {
                    rz[c] += w2rz1[c] + v[self.off_c2() + c];
                }
                let prz = p.dot(&rz);
                let rdz: Array1<f64> = (0..k).map(|c| p[c] * (rz[c] - prz)).collect();
                // differentiated output layer: R{dz z1'} = Rdz z1' + dz Rz1'
                for c in 0..k {
                    let base = self.off_w2() + c * h;
                    for j in 0..h {
                        out[base + j] += coef * (rdz[c] * z1[j] + dz[c] * rz1[j]);
                    }
                    out[self.off_c2() + c] += coef * rdz[c];
                }
                // differentiated hidden layer
                let dz1 = matvec_t(w, self.off_w2(), k, h, &dz);
                let rdz1_v = matvec_t(v, self.off_w2(), k, h, &dz);
                let rdz1_w = matvec_t(w, self.off_w2(), k, h, &rdz);
                for j in 0..h {
                    let a = 1.0 - z1[j] * z1[j];
                    let rdu = (rdz1_v[j] + rdz1_w[j]) * a - 2.0 * dz1[j] * z1[j] * rz1[j];
                    let g = coef * rdu;
                    let base = j * din;
                    for l in 0..din {
                        out[base + l] += g * x[l];
                    }
                    out[self.off_c1() + j] += g;
                }
            }
        }
        Ok(out)
    }

    /// Gauss-Newton product `J' L'' J v` in the configured form, plus the
    /// exact `reg * v` term.
    pub(super) fn ggn_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        let mut out = v * self.reg;
        let coef = 1.0 / batch.len() as f64;
        let k = self.classes;
        for &i in batch.indices() {
            let (z, z1) = self.logits(w, i);
            let lse = log_sum_exp(&z);
            let p = z.mapv(|val| (val - lse).exp());
            let rz = self.jvp_logits(w, v, i, z1.as_ref());
            let prz = p.dot(&rz);
            // softmax curvature applied to Rz: (diag(p) - p p') Rz
            let s_rz: Array1<f64> = (0..k).map(|c| p[c] * (rz[c] - prz)).collect();
            let wz = match self.form {
                GgnForm::Softmax => s_rz,
                GgnForm::DiagonalProbability => {
                    // diag(t/p^2) on probability outputs; t is one-hot, so
                    // only the labeled component survives, then the softmax
                    // Jacobian is applied once more on the way back.
                    let t = self.ts[i];
                    let scale = s_rz[t] / (p[t] * p[t]);
                    (0..k)
                        .map(|c| {
                            let u2 = if c == t { scale } else { 0.0 };
                            p[c] * (u2 - p[t] * scale)
                        })
                        .collect()
                }
            };
            self.accumulate_vjp(w, i, z1.as_ref(), &wz, coef, &mut out);
        }
        Ok(out)
    }

    /// Misclassification rate under the argmax decision rule.
    pub(super) fn eval_error(&self, w: &Array1<f64>, data: &Dataset) -> Result<f64> {
        if data.dim() > self.din {
            return Err(Error::DimensionMismatch {
                expected: self.din,
                got: data.dim(),
            });
        }
        if data.n() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut wrong = 0usize;
        for i in 0..data.n() {
            let t = class_label(data.label(i), self.classes, i)?;
            let mut x = Array1::zeros(self.din);
            for &(j, val) in data.row(i) {
                x[j] = val;
            }
            let (z, _) = self.logits_at(w, x.view());
            let mut best = 0;
            for c in 1..self.classes {
                if z[c] > z[best] {
                    best = c;
                }
            }
            if best != t {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / data.n() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{synth_dataset, SynthKind};
    use super::*;

    fn toy(hidden: usize, form: GgnForm) -> MlpProblem {
        let synth = synth_dataset(
            SynthKind::CrossEntropy { classes: 3 },
            12,
            4,
            21,
            0.1,
        )
        .unwrap();
        MlpProblem::new(synth.dataset, 0.01, hidden, 3, form).unwrap()
    }

    #[test]
    fn parameter_count_matches_layout() {
        assert_eq!(toy(5, GgnForm::Softmax).dim(), 5 * 4 + 5 + 3 * 5 + 3);
        assert_eq!(toy(0, GgnForm::Softmax).dim(), 3 * 4 + 3);
    }

    #[test]
    fn loss_at_zero_weights_is_ln_classes() {
        for hidden in [0, 5] {
            let p = toy(hidden, GgnForm::Softmax);
            let w = Array1::zeros(p.dim());
            let loss = p.batch_loss(&w, &BatchSpec::full(12)).unwrap();
            assert!((loss - (3.0f64).ln()).abs() < 1e-15, "hidden={hidden}");
        }
    }

    #[test]
    fn rejects_non_class_labels() {
        let data = Dataset::new(vec![vec![(0, 1.0)]], vec![1.5], 1).unwrap();
        assert!(MlpProblem::new(data.clone(), 0.0, 2, 3, GgnForm::Softmax).is_err());
        let data = Dataset::new(vec![vec![(0, 1.0)]], vec![3.0], 1).unwrap();
        assert!(MlpProblem::new(data, 0.0, 2, 3, GgnForm::Softmax).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = toy(5, GgnForm::Softmax);
        let full = BatchSpec::full(12);
        let w = p.gaussian_init(3);
        let g = p.batch_gradient(&w, &full).unwrap();
        let eps = 1e-6;
        for j in 0..p.dim() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j] += eps;
            wm[j] -= eps;
            let fd = (p.batch_loss(&wp, &full).unwrap() - p.batch_loss(&wm, &full).unwrap())
                / (2.0 * eps);
            assert!(
                (g[j] - fd).abs() < 1e-6 * g[j].abs().max(1.0),
                "coordinate {j}: {} vs {fd}",
                g[j]
            );
        }
    }

    #[test]
    fn hessian_product_matches_gradient_differences() {
        let p = toy(4, GgnForm::Softmax);
        let full = BatchSpec::full(12);
        let w = p.gaussian_init(5);
        let mut v = p.gaussian_init(6);
        v /= v.dot(&v).sqrt();
        let hv = p.hessian_vec(&w, &full, &v).unwrap();
        let eps = 1e-5;
        let gp = p.batch_gradient(&(&w + &(&v * eps)), &full).unwrap();
        let gm = p.batch_gradient(&(&w - &(&v * eps)), &full).unwrap();
        let fd = (&gp - &gm) / (2.0 * eps);
        let num = (&hv - &fd).dot(&(&hv - &fd)).sqrt();
        let den = fd.dot(&fd).sqrt().max(1.0);
        assert!(num / den < 1e-6, "relative deviation {}", num / den);
    }

    #[test]
    fn linear_network_ggn_equals_hessian() {
        let p = toy(0, GgnForm::Softmax);
        let full = BatchSpec::full(12);
        let w = p.gaussian_init(7);
        let v = p.gaussian_init(8);
        let hv = p.hessian_vec(&w, &full, &v).unwrap();
        let gv = p.ggn_vec(&w, &full, &v).unwrap();
        let num = (&hv - &gv).dot(&(&hv - &gv)).sqrt();
        assert!(num <= 1e-12 * hv.dot(&hv).sqrt().max(1e-300));
    }

    #[test]
    fn ggn_is_positive_semidefinite_in_both_forms() {
        for form in [GgnForm::Softmax, GgnForm::DiagonalProbability] {
            let p = toy(4, form);
            let full = BatchSpec::full(12);
            let w = p.gaussian_init(9);
            for seed in 10..15 {
                let v = p.gaussian_init(seed);
                let gv = p.ggn_vec(&w, &full, &v).unwrap();
                assert!(v.dot(&gv) >= -1e-12, "form {form:?} seed {seed}");
            }
        }
    }

    #[test]
    fn ggn_forms_are_distinct_operators_with_hidden_layer() {
        let a = toy(4, GgnForm::Softmax);
        let b = toy(4, GgnForm::DiagonalProbability);
        let full = BatchSpec::full(12);
        let w = a.gaussian_init(11);
        let v = a.gaussian_init(12);
        let ga = a.ggn_vec(&w, &full, &v).unwrap();
        let gb = b.ggn_vec(&w, &full, &v).unwrap();
        let diff = (&ga - &gb).dot(&(&ga - &gb)).sqrt();
        assert!(diff > 1e-8, "forms coincided: diff {diff}");
    }

    #[test]
    fn planted_linear_model_classifies_its_own_data() {
        let synth = synth_dataset(SynthKind::CrossEntropy { classes: 3 }, 25, 4, 31, 0.0).unwrap();
        let p = MlpProblem::new(synth.dataset.clone(), 0.0, 0, 3, GgnForm::Softmax).unwrap();
        let mut w = Array1::zeros(p.dim());
        for c in 0..3 {
            for j in 0..4 {
                w[c * 4 + j] = synth.planted[[c, j]];
            }
        }
        assert_eq!(p.eval_error(&w, &synth.dataset).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_init_is_seed_deterministic() {
        let p = toy(5, GgnForm::Softmax);
        let a = p.gaussian_init(42);
        let b = p.gaussian_init(42);
        let c = p.gaussian_init(43);
        assert_eq!(a, b);
        assert!(a != c);
        // biases start at zero
        let off_c1 = 5 * 4;
        for j in 0..5 {
            assert_eq!(a[off_c1 + j], 0.0);
        }
    }
}
