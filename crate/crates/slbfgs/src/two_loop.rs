//! Classic and vector-free two-loop recursions.
//!
//! Both routines evaluate the same map: given the pair memory, an initial
//! scaling `H0`, and a gradient `g`, they return the quasi-Newton direction
//! `-H g`, where `H` is the L-BFGS inverse-Hessian approximation. The classic
//! form works directly on length-`d` vectors. The vector-free form first
//! reduces the memory to the `(m+1) x m` Gram matrix of base-vector dot
//! products and then runs both loops on scalar coefficients; its only
//! length-`d` work is the dot-product matrix, one `H0` application, the `m`
//! products `y_j' r0`, and the final linear combination — which is what makes
//! the data-parallel realization in [`crate::distributed`] cheap.

use ndarray::{Array1, Array2};

use crate::curvature::LbfgsMemory;
use crate::error::{Error, Result};

/// Initial scaling `H0` applied in the middle of the recursion.
///
/// All variants represent symmetric positive definite diagonal operators;
/// `Diagonal` entries and the `Uniform` factor must be strictly positive and
/// finite. Use the checked constructors when the values come from data.
#[derive(Debug, Clone)]
pub enum InitialScale {
    /// `H0 = I`.
    Identity,
    /// `H0 = gamma * I`, e.g. the classical `(y's / y'y) * I` scaling.
    Uniform(f64),
    /// `H0 = diag(entries)`, e.g. the ADAM preconditioner `1/(sqrt(v) + c)`.
    Diagonal(Array1<f64>),
}

impl InitialScale {
    /// Checked constructor for `Uniform`.
    pub fn uniform(gamma: f64) -> Result<Self> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "uniform scaling must be positive and finite, got {gamma}"
            )));
        }
        Ok(InitialScale::Uniform(gamma))
    }

    /// Checked constructor for `Diagonal`.
    pub fn diagonal(entries: Array1<f64>) -> Result<Self> {
        if !entries.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(
                "diagonal scaling must have strictly positive finite entries".into(),
            ));
        }
        Ok(InitialScale::Diagonal(entries))
    }

    /// Apply `H0` to a vector.
    pub fn apply(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        match self {
            InitialScale::Identity => Ok(v.clone()),
            InitialScale::Uniform(gamma) => Ok(v * *gamma),
            InitialScale::Diagonal(diag) => {
                if diag.len() != v.len() {
                    return Err(Error::DimensionMismatch {
                        expected: diag.len(),
                        got: v.len(),
                    });
                }
                debug_assert!(diag.iter().all(|x| *x > 0.0));
                Ok(diag * v)
            }
        }
    }

    /// Extremal eigenvalues `(sigma, Sigma)` of the operator.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            InitialScale::Identity => (1.0, 1.0),
            InitialScale::Uniform(gamma) => (*gamma, *gamma),
            InitialScale::Diagonal(diag) => diag.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), v| (lo.min(*v), hi.max(*v)),
            ),
        }
    }

    /// Dense matrix form, for the desk-scale reference constructions.
    pub fn dense(&self, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((d, d));
        for i in 0..d {
            m[[i, i]] = match self {
                InitialScale::Identity => 1.0,
                InitialScale::Uniform(gamma) => *gamma,
                InitialScale::Diagonal(diag) => diag[i],
            };
        }
        m
    }
}

/// The Gram matrix of the vector-free recursion.
///
/// `entries` has shape `(m + 1, m)`: row `p < m` holds `y_p' s_q`, the last
/// row holds `g' s_q`, with pairs indexed oldest to newest. The diagonal
/// `y_j' s_j` is strictly positive for any memory built through the cautious
/// test.
#[derive(Debug, Clone)]
pub struct DotMatrix {
    pub entries: Array2<f64>,
}

impl DotMatrix {
    /// Number of pairs the matrix was built from.
    pub fn memory_size(&self) -> usize {
        self.entries.ncols()
    }
}

/// Build the `(m+1) x m` dot-product matrix for the current memory and
/// gradient. Errors on an empty memory.
pub fn dot_matrix(memory: &LbfgsMemory, g: &Array1<f64>) -> Result<DotMatrix> {
    let mut dots = 0usize;
    dot_matrix_counted(memory, g, &mut dots)
}

fn dot_matrix_counted(
    memory: &LbfgsMemory,
    g: &Array1<f64>,
    dots: &mut usize,
) -> Result<DotMatrix> {
    let m = memory.len();
    if m == 0 {
        return Err(Error::EmptyMemory);
    }
    let d = memory.dim().expect("nonempty memory has a dimension");
    if g.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: g.len(),
        });
    }
    let mut entries = Array2::zeros((m + 1, m));
    for p in 0..m {
        for q in 0..m {
            entries[[p, q]] = memory.pair(p).y.dot(&memory.pair(q).s);
            *dots += 1;
        }
    }
    for q in 0..m {
        entries[[m, q]] = g.dot(&memory.pair(q).s);
        *dots += 1;
    }
    Ok(DotMatrix { entries })
}

/// Direction together with the scalar state of the vector-free recursion.
#[derive(Debug, Clone)]
pub struct DirectionResult {
    /// `-H g`.
    pub direction: Array1<f64>,
    /// Final base-vector coefficients, length `2m + 2`:
    /// `delta[0]` multiplies `r0 = H0 q`, `delta[1..=m]` the `s` vectors,
    /// `delta[m+1..=2m]` the `y` vectors, `delta[2m+1]` the gradient.
    pub deltas: Vec<f64>,
    /// First-loop coefficients, newest pair last, length `m`.
    pub alphas: Vec<f64>,
}

/// Count of length-`d` vector operations per phase of the vector-free path.
///
/// The recursion touches full-length vectors nowhere else, so
/// `dot_matrix = m(m+1)`, `scaling = m + 2` (assembling `q` plus the single
/// `H0` application), `y_products = m`, and `combination = m + 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VectorOpProfile {
    pub dot_matrix: usize,
    pub scaling: usize,
    pub y_products: usize,
    pub combination: usize,
}

impl VectorOpProfile {
    pub fn total(&self) -> usize {
        self.dot_matrix + self.scaling + self.y_products + self.combination
    }
}

/// Classic two-loop recursion: returns `-H g` working on full vectors.
pub fn classic_two_loop(
    memory: &LbfgsMemory,
    g: &Array1<f64>,
    h0: &InitialScale,
) -> Result<Array1<f64>> {
    if let Some(d) = memory.dim() {
        if g.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: g.len(),
            });
        }
    }
    let m = memory.len();
    let mut q = -g;
    let mut alphas = vec![0.0; m];
    for i in (0..m).rev() {
        let pair = memory.pair(i);
        if pair.ys <= 0.0 {
            return Err(Error::ContractViolation(format!(
                "stored pair {i} has y's = {} <= 0",
                pair.ys
            )));
        }
        let a = pair.s.dot(&q) / pair.ys;
        q.scaled_add(-a, &pair.y);
        alphas[i] = a;
    }
    let mut r = h0.apply(&q)?;
    for (i, &a) in alphas.iter().enumerate() {
        let pair = memory.pair(i);
        let beta = pair.y.dot(&r) / pair.ys;
        r.scaled_add(a - beta, &pair.s);
    }
    Ok(r)
}

/// First loop of the vector-free recursion, on scalar coefficients only.
///
/// `deltas` must be the running coefficient vector of length `2m + 2`;
/// returns the `alpha` coefficients. Shared with the distributed server.
pub(crate) fn vf_first_loop(entries: &Array2<f64>, deltas: &mut [f64]) -> Result<Vec<f64>> {
    let m = entries.ncols();
    let mut alphas = vec![0.0; m];
    for j in (0..m).rev() {
        let diag = entries[[j, j]];
        if diag <= 0.0 {
            return Err(Error::ContractViolation(format!(
                "dot-matrix diagonal {j} is {diag} <= 0"
            )));
        }
        let mut acc = 0.0;
        for l in 0..=m {
            acc += deltas[m + 1 + l] * entries[[l, j]];
        }
        let a = acc / diag;
        alphas[j] = a;
        deltas[m + 1 + j] -= a;
    }
    Ok(alphas)
}

/// Second loop of the vector-free recursion. `y_dots[j] = y_j' r0`.
pub(crate) fn vf_second_loop(
    entries: &Array2<f64>,
    y_dots: &[f64],
    alphas: &[f64],
    deltas: &mut [f64],
) -> Result<()> {
    let m = entries.ncols();
    for j in 0..m {
        let diag = entries[[j, j]];
        if diag <= 0.0 {
            return Err(Error::ContractViolation(format!(
                "dot-matrix diagonal {j} is {diag} <= 0"
            )));
        }
        let mut acc = deltas[0] * y_dots[j];
        for l in 0..m {
            acc += deltas[1 + l] * entries[[j, l]];
        }
        let beta = acc / diag;
        deltas[1 + j] += alphas[j] - beta;
    }
    Ok(())
}

/// Vector-free two-loop recursion.
///
/// Equivalent to [`classic_two_loop`] but runs both loops on coefficients of
/// the base vectors `[s_1..s_m, y_1..y_m, g]`; see [`DirectionResult`] for
/// the returned scalar state.
pub fn vector_free_two_loop(
    memory: &LbfgsMemory,
    g: &Array1<f64>,
    h0: &InitialScale,
) -> Result<DirectionResult> {
    vector_free_two_loop_profiled(memory, g, h0).map(|(result, _)| result)
}

/// [`vector_free_two_loop`] with an exact count of length-`d` vector
/// operations per phase.
pub fn vector_free_two_loop_profiled(
    memory: &LbfgsMemory,
    g: &Array1<f64>,
    h0: &InitialScale,
) -> Result<(DirectionResult, VectorOpProfile)> {
    if let Some(d) = memory.dim() {
        if g.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: g.len(),
            });
        }
    }
    let m = memory.len();
    let d = g.len();
    let mut profile = VectorOpProfile::default();

    let mut deltas = vec![0.0; 2 * m + 2];
    deltas[0] = 1.0;
    deltas[2 * m + 1] = -1.0;

    let (gram, alphas) = if m > 0 {
        let gram = dot_matrix_counted(memory, g, &mut profile.dot_matrix)?;
        let alphas = vf_first_loop(&gram.entries, &mut deltas)?;
        (Some(gram), alphas)
    } else {
        (None, Vec::new())
    };

    // q = sum of the y and g base vectors weighted by the current deltas.
    let mut q = Array1::zeros(d);
    for i in 0..m {
        q.scaled_add(deltas[m + 1 + i], &memory.pair(i).y);
        profile.scaling += 1;
    }
    q.scaled_add(deltas[2 * m + 1], g);
    profile.scaling += 1;
    let r0 = h0.apply(&q)?;
    profile.scaling += 1;

    let y_dots: Vec<f64> = (0..m)
        .map(|i| {
            profile.y_products += 1;
            memory.pair(i).y.dot(&r0)
        })
        .collect();

    if let Some(gram) = &gram {
        vf_second_loop(&gram.entries, &y_dots, &alphas, &mut deltas)?;
    }

    let mut direction = &r0 * deltas[0];
    profile.combination += 1;
    for i in 0..m {
        direction.scaled_add(deltas[1 + i], &memory.pair(i).s);
        profile.combination += 1;
    }

    Ok((
        DirectionResult {
            direction,
            deltas,
            alphas,
        },
        profile,
    ))
}
