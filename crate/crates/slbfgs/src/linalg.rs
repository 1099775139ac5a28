//! Small dense linear-algebra helpers.
//!
//! Everything here targets the desk-scale matrices used by the reference
//! solves and the theory checks (dimension at most a few hundred), so plain
//! `O(d^3)` routines are sufficient and keep the crate free of external
//! LAPACK bindings.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Solve `A x = b` by LU factorization with partial pivoting.
pub fn solve(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if lu[[row, col]].abs() > lu[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if lu[[pivot, col]] == 0.0 {
            return Err(Error::ContractViolation("singular matrix".into()));
        }
        if pivot != col {
            for k in 0..n {
                lu.swap([pivot, k], [col, k]);
            }
            x.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = lu[[row, col]] / lu[[col, col]];
            lu[[row, col]] = factor;
            for k in col + 1..n {
                lu[[row, k]] -= factor * lu[[col, k]];
            }
            x[row] -= factor * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= lu[[row, k]] * x[k];
        }
        x[row] = acc / lu[[row, row]];
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix via the cyclic Jacobi method,
/// returned in ascending order.
///
/// Convergence is quadratic; 30 sweeps are far more than needed at the
/// dimensions used here. Asymmetric input is rejected.
pub fn symmetric_eigenvalues(a: &ArrayView2<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: a.ncols(),
        });
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 * scale {
                return Err(Error::ContractViolation(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut m = a.to_owned();
    // Symmetrize exactly so rotations preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    for _sweep in 0..30 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(m[[i, j]].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    Ok(eigs)
}

/// Relative error `|a - b| / max(|b|, floor)`, the form used throughout the
/// test suites.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Relative vector error `|a - b| / max(|b|, floor)` in the Euclidean norm.
pub fn rel_err_vec(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
        norm += y * y;
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}
