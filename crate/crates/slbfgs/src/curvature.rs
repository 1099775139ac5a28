//! Bounded curvature-pair memory with cautious acceptance.
//!
//! A pair `(s, y)` enters the memory only if it is numerically useful:
//! `y's >= eps * |s|^2` with `eps > 0`. Every stored pair therefore has
//! `y's > 0`, which keeps the two-loop recursion well defined (all
//! `rho = 1 / y's` are finite and positive) and, together with the rest of
//! the update rule, bounds the eigenvalues of the implied inverse-Hessian
//! approximation.

use std::collections::VecDeque;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Default threshold for the cautious acceptance test.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// One accepted curvature pair together with its cached inner products.
#[derive(Debug, Clone)]
pub struct CurvaturePair {
    pub s: Array1<f64>,
    pub y: Array1<f64>,
    /// `y's` (strictly positive for stored pairs).
    pub ys: f64,
    /// `|s|^2`.
    pub ss: f64,
    /// `|y|^2`.
    pub yy: f64,
}

impl CurvaturePair {
    fn new(s: Array1<f64>, y: Array1<f64>) -> Self {
        let ys = y.dot(&s);
        let ss = s.dot(&s);
        let yy = y.dot(&y);
        CurvaturePair { s, y, ys, ss, yy }
    }
}

/// Ring buffer of at most `capacity` cautiously accepted pairs.
///
/// With fewer than `capacity` pairs stored (warm-up), all operations use the
/// current pair count as the effective memory size.
#[derive(Debug, Clone)]
pub struct LbfgsMemory {
    capacity: usize,
    epsilon: f64,
    pairs: VecDeque<CurvaturePair>,
}

impl LbfgsMemory {
    /// Create an empty memory. `capacity = 0` is allowed and turns the
    /// surrounding optimizer into plain ADAM. `epsilon` must be positive.
    pub fn new(capacity: usize, epsilon: f64) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cautious threshold must be positive and finite, got {epsilon}"
            )));
        }
        Ok(LbfgsMemory {
            capacity,
            epsilon,
            pairs: VecDeque::with_capacity(capacity),
        })
    }

    /// Create a memory with the default cautious threshold.
    pub fn with_default_epsilon(capacity: usize) -> Self {
        LbfgsMemory::new(capacity, DEFAULT_EPSILON).expect("default epsilon is valid")
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Number of pairs currently stored (the effective memory size).
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Parameter dimension of the stored pairs, if any are present.
    pub fn dim(&self) -> Option<usize> {
        self.pairs.front().map(|p| p.s.len())
    }

    /// Stored pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    /// Pair by oldest-first index.
    pub fn pair(&self, index: usize) -> &CurvaturePair {
        &self.pairs[index]
    }

    /// Apply the cautious test to `(s, y)` and store the pair if it passes.
    ///
    /// Returns whether the pair passed `y's >= eps * |s|^2` (a zero step
    /// never passes). On success the oldest pair is evicted once the buffer
    /// is full; on rejection the memory is left untouched. Storage is skipped
    /// when `capacity = 0`, but the verdict is still reported so callers can
    /// track skip statistics uniformly.
    pub fn push_pair(&mut self, s: Array1<f64>, y: Array1<f64>) -> Result<bool> {
        if s.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: s.len(),
                got: y.len(),
            });
        }
        if let Some(d) = self.dim() {
            if s.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.len(),
                });
            }
        }
        let pair = CurvaturePair::new(s, y);
        let accepted = pair.ss > 0.0 && pair.ys >= self.epsilon * pair.ss;
        if accepted && self.capacity > 0 {
            if self.pairs.len() == self.capacity {
                self.pairs.pop_front();
            }
            self.pairs.push_back(pair);
        }
        Ok(accepted)
    }

    /// The base-vector list for the vector-free recursion:
    /// `[s_1..s_m, y_1..y_m, g]` with pairs ordered oldest to newest and the
    /// current (possibly momentum-filtered) gradient last. The effective `m`
    /// is the current pair count.
    pub fn base_vectors<'a>(&'a self, g: &'a Array1<f64>) -> Result<Vec<ArrayView1<'a, f64>>> {
        if let Some(d) = self.dim() {
            if g.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: g.len(),
                });
            }
        }
        let mut base = Vec::with_capacity(2 * self.pairs.len() + 1);
        base.extend(self.pairs.iter().map(|p| p.s.view()));
        base.extend(self.pairs.iter().map(|p| p.y.view()));
        base.push(g.view());
        Ok(base)
    }

    /// Build a memory directly from pairs, bypassing the cautious test.
    ///
    /// Only for tests that need to exercise defensive checks downstream;
    /// regular construction must go through [`LbfgsMemory::push_pair`].
    #[doc(hidden)]
    pub fn from_pairs_unchecked(
        capacity: usize,
        epsilon: f64,
        pairs: Vec<(Array1<f64>, Array1<f64>)>,
    ) -> Self {
        LbfgsMemory {
            capacity,
            epsilon,
            pairs: pairs
                .into_iter()
                .map(|(s, y)| CurvaturePair::new(s, y))
                .collect(),
        }
    }
}
