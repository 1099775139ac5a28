//! Finite-sum problem oracles and mini-batch machinery.
//!
//! Every objective has the form `F(w) = (1/n) sum_i f_i(w)` plus an optional
//! `reg/2 |w|^2` term folded into each `f_i`. Oracles expose batch loss,
//! batch gradient, exact Hessian-vector products, and Gauss-Newton/Fisher
//! products over an explicit index set, which is what the curvature-pair
//! construction, the distributed simulator, and the theory checks all build
//! on.

mod dataset;
mod least_squares;
mod logistic;
mod mlp;

pub use dataset::{parse_libsvm, synth_dataset, Dataset, SynthDataset, SynthKind};
pub use least_squares::LeastSquaresProblem;
pub use logistic::LogisticProblem;
pub use mlp::{GgnForm, MlpProblem, DEFAULT_HIDDEN_WIDTH};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Provenance of a sampled batch, for reproducibility audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLineage {
    /// Seed of the stream the batch was drawn from.
    pub seed: u64,
    /// 0-based draw counter within that stream.
    pub draw: u64,
}

/// An index set `S` over the samples of a dataset.
///
/// Indices are strictly increasing (sampling sorts them; set order does not
/// affect any oracle up to floating-point summation order, and a canonical
/// order keeps runs bit-reproducible).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    indices: Vec<usize>,
    lineage: Option<BatchLineage>,
}

impl BatchSpec {
    /// The full batch `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        BatchSpec {
            indices: (0..n).collect(),
            lineage: None,
        }
    }

    /// Wrap explicit indices; they must be strictly increasing.
    pub fn from_indices(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "batch indices must be strictly increasing".into(),
            ));
        }
        Ok(BatchSpec {
            indices,
            lineage: None,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn lineage(&self) -> Option<BatchLineage> {
        self.lineage
    }

    /// Largest index plus one; 0 for an empty batch.
    pub fn max_exclusive(&self) -> usize {
        self.indices.last().map_or(0, |i| i + 1)
    }
}

/// Draw `b` of `n` indices uniformly without replacement (every size-`b`
/// subset is equally likely), returned sorted.
pub fn sample_batch<R: rand::Rng>(n: usize, b: usize, rng: &mut R) -> Result<BatchSpec> {
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if b > n {
        return Err(Error::NotEnough {
            requested: b,
            available: n,
        });
    }
    let mut indices = rand::seq::index::sample(rng, n, b).into_vec();
    indices.sort_unstable();
    Ok(BatchSpec {
        indices,
        lineage: None,
    })
}

/// Deterministic batch source: a counter-stamped ChaCha stream.
///
/// Two streams with the same seed yield identical batch sequences, so runs
/// of different optimizer variants under one seed consume the same data
/// order (paired-seed comparability).
#[derive(Debug, Clone)]
pub struct BatchStream {
    rng: ChaCha20Rng,
    seed: u64,
    n: usize,
    draws: u64,
}

impl BatchStream {
    pub fn new(seed: u64, n: usize) -> Self {
        BatchStream {
            rng: ChaCha20Rng::seed_from_u64(seed),
            seed,
            n,
            draws: 0,
        }
    }

    /// Sample the next batch of size `b`, stamped with its lineage.
    pub fn next_batch(&mut self, b: usize) -> Result<BatchSpec> {
        let mut batch = sample_batch(self.n, b, &mut self.rng)?;
        batch.lineage = Some(BatchLineage {
            seed: self.seed,
            draw: self.draws,
        });
        self.draws += 1;
        Ok(batch)
    }
}

/// A finite-sum objective with batch derivatives and curvature products.
#[derive(Debug, Clone)]
pub enum ProblemOracle {
    Logistic(LogisticProblem),
    LeastSquares(LeastSquaresProblem),
    CrossEntropyMlp(MlpProblem),
}

impl ProblemOracle {
    /// Parameter dimension.
    pub fn dim(&self) -> usize {
        match self {
            ProblemOracle::Logistic(p) => p.dim(),
            ProblemOracle::LeastSquares(p) => p.dim(),
            ProblemOracle::CrossEntropyMlp(p) => p.dim(),
        }
    }

    /// Number of samples `n` in the finite sum.
    pub fn n_samples(&self) -> usize {
        match self {
            ProblemOracle::Logistic(p) => p.n(),
            ProblemOracle::LeastSquares(p) => p.n(),
            ProblemOracle::CrossEntropyMlp(p) => p.n(),
        }
    }

    /// L2 coefficient folded into every component function.
    pub fn regularization(&self) -> f64 {
        match self {
            ProblemOracle::Logistic(p) => p.regularization(),
            ProblemOracle::LeastSquares(p) => p.regularization(),
            ProblemOracle::CrossEntropyMlp(p) => p.regularization(),
        }
    }

    /// Whether the objective is convex in the parameters.
    pub fn is_convex(&self) -> bool {
        match self {
            ProblemOracle::Logistic(_) | ProblemOracle::LeastSquares(_) => true,
            ProblemOracle::CrossEntropyMlp(p) => p.is_linear(),
        }
    }

    /// Whether the loss Hessian w.r.t. the model outputs is diagonal, the
    /// property the sharded Gauss-Newton product relies on.
    pub fn has_diagonal_loss_hessian(&self) -> bool {
        match self {
            ProblemOracle::Logistic(_) | ProblemOracle::LeastSquares(_) => true,
            ProblemOracle::CrossEntropyMlp(p) => p.ggn_form() == GgnForm::DiagonalProbability,
        }
    }

    /// Mean loss over the batch: `(1/|S|) sum_{i in S} f_i(w)`.
    pub fn batch_loss(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<f64> {
        self.validate(w, batch)?;
        match self {
            ProblemOracle::Logistic(p) => p.batch_loss(w, batch),
            ProblemOracle::LeastSquares(p) => p.batch_loss(w, batch),
            ProblemOracle::CrossEntropyMlp(p) => p.batch_loss(w, batch),
        }
    }

    /// Mean gradient over the batch.
    pub fn batch_gradient(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<Array1<f64>> {
        self.validate(w, batch)?;
        match self {
            ProblemOracle::Logistic(p) => p.batch_gradient(w, batch),
            ProblemOracle::LeastSquares(p) => p.batch_gradient(w, batch),
            ProblemOracle::CrossEntropyMlp(p) => p.batch_gradient(w, batch),
        }
    }

    /// Exact Hessian-vector product of the batch objective.
    pub fn hessian_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        self.validate(w, batch)?;
        self.validate_vec(v)?;
        match self {
            ProblemOracle::Logistic(p) => p.hessian_vec(w, batch, v),
            ProblemOracle::LeastSquares(p) => p.hessian_vec(w, batch, v),
            ProblemOracle::CrossEntropyMlp(p) => p.hessian_vec(w, batch, v),
        }
    }

    /// Gauss-Newton / Fisher product of the batch objective (positive
    /// semidefinite by construction; includes the exact Hessian of the
    /// regularizer).
    pub fn ggn_vec(
        &self,
        w: &Array1<f64>,
        batch: &BatchSpec,
        v: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        self.validate(w, batch)?;
        self.validate_vec(v)?;
        match self {
            ProblemOracle::Logistic(p) => p.ggn_vec(w, batch, v),
            ProblemOracle::LeastSquares(p) => p.ggn_vec(w, batch, v),
            ProblemOracle::CrossEntropyMlp(p) => p.ggn_vec(w, batch, v),
        }
    }

    /// Full objective `F(w)`.
    pub fn full_loss(&self, w: &Array1<f64>) -> Result<f64> {
        self.batch_loss(w, &BatchSpec::full(self.n_samples()))
    }

    /// Full gradient of `F`.
    pub fn full_gradient(&self, w: &Array1<f64>) -> Result<Array1<f64>> {
        self.batch_gradient(w, &BatchSpec::full(self.n_samples()))
    }

    /// Starting point: zero for the convex families, a scaled Gaussian
    /// (std `1/sqrt(fan_in)`) for the nonconvex MLP.
    pub fn initial_point(&self, seed: u64) -> Array1<f64> {
        match self {
            ProblemOracle::Logistic(_) | ProblemOracle::LeastSquares(_) => {
                Array1::zeros(self.dim())
            }
            ProblemOracle::CrossEntropyMlp(p) => {
                if p.is_linear() {
                    Array1::zeros(self.dim())
                } else {
                    p.gaussian_init(seed)
                }
            }
        }
    }

    /// Generalization metric on held-out data: misclassification rate for
    /// the classifiers, mean squared residual for least squares.
    pub fn eval_error(&self, w: &Array1<f64>, data: &Dataset) -> Result<f64> {
        match self {
            ProblemOracle::Logistic(p) => p.eval_error(w, data),
            ProblemOracle::LeastSquares(p) => p.eval_error(w, data),
            ProblemOracle::CrossEntropyMlp(p) => p.eval_error(w, data),
        }
    }

    /// Short name for reports.
    pub fn kind_name(&self) -> &'static str {
        match self {
            ProblemOracle::Logistic(_) => "logistic",
            ProblemOracle::LeastSquares(_) => "least-squares",
            ProblemOracle::CrossEntropyMlp(p) => {
                if p.is_linear() {
                    "cross-entropy-linear"
                } else {
                    "cross-entropy-mlp"
                }
            }
        }
    }

    fn validate(&self, w: &Array1<f64>, batch: &BatchSpec) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: w.len(),
            });
        }
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.n_samples();
        if batch.max_exclusive() > n {
            return Err(Error::IndexOutOfRange {
                index: batch.max_exclusive() - 1,
                n,
            });
        }
        Ok(())
    }

    fn validate_vec(&self, v: &Array1<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }
}
