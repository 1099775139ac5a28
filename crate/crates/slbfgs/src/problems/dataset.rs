//! Datasets: sparse design matrices, a LIBSVM-format reader, and synthetic
//! generators with planted parameters.

use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A labelled design matrix with sparse rows.
///
/// Row entries are `(column, value)` pairs with strictly increasing 0-based
/// columns. Labels are stored as raw `f64`; each problem oracle validates the
/// label convention it needs (`+-1`, class index, or real target).
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: Vec<Vec<(usize, f64)>>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    /// Validating constructor: every entry must be finite, columns in range
    /// and strictly increasing, and one label per row.
    pub fn new(rows: Vec<Vec<(usize, f64)>>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: labels.len(),
            });
        }
        for (i, row) in rows.iter().enumerate() {
            let mut last: Option<usize> = None;
            for &(col, value) in row {
                if col >= dim {
                    return Err(Error::InvalidConfig(format!(
                        "row {i} has column {col} >= dimension {dim}"
                    )));
                }
                if last.is_some_and(|prev| col <= prev) {
                    return Err(Error::InvalidConfig(format!(
                        "row {i} has non-increasing column indices"
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "row {i} has a non-finite feature value"
                    )));
                }
                last = Some(col);
            }
        }
        if labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidConfig("non-finite label".into()));
        }
        Ok(Dataset { rows, labels, dim })
    }

    /// Build from a dense matrix, dropping exact zeros.
    pub fn from_dense(features: &Array2<f64>, labels: Vec<f64>) -> Result<Self> {
        let rows = features
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j, *v))
                    .collect()
            })
            .collect();
        Dataset::new(rows, labels, features.ncols())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Inner product of row `i` with a dense vector.
    pub fn row_dot(&self, i: usize, w: &Array1<f64>) -> f64 {
        self.rows[i].iter().map(|&(j, v)| v * w[j]).sum()
    }

    /// `out += coef * row_i`.
    pub fn add_row_scaled(&self, i: usize, coef: f64, out: &mut Array1<f64>) {
        for &(j, v) in &self.rows[i] {
            out[j] += coef * v;
        }
    }

    /// Densify a single row.
    pub fn row_dense(&self, i: usize) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim);
        for &(j, v) in &self.rows[i] {
            out[j] = v;
        }
        out
    }

    /// Densify the whole matrix (used by the MLP oracle).
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n(), self.dim));
        for i in 0..self.n() {
            for &(j, v) in &self.rows[i] {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Rows by index, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut rows = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n() {
                return Err(Error::IndexOutOfRange { index: i, n: self.n() });
            }
            rows.push(self.rows[i].clone());
            labels.push(self.labels[i]);
        }
        Dataset::new(rows, labels, self.dim)
    }

    /// Deterministic shuffled split into `(train, test)` with
    /// `round(fraction * n)` rows held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let n = self.n();
        let n_test = (test_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Fisher-Yates; explicit so the split is stable across rand versions.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let test = self.subset(&order[..n_test])?;
        let train = self.subset(&order[n_test..])?;
        Ok((train, test))
    }
}

/// Parse a LIBSVM-format file: one `label idx:value ...` line per sample
/// with 1-based feature indices. The dimension is the largest index seen.
pub fn parse_libsvm(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = 0usize;
    for (line_index, line) in reader.lines().enumerate() {
        let line_no = line_index + 1;
        let line = line?;
        let malformed = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let mut tokens = line.split_whitespace();
        let label_token = tokens
            .next()
            .ok_or_else(|| malformed("missing label".into()))?;
        let label: f64 = label_token
            .parse()
            .map_err(|_| malformed(format!("bad label {label_token:?}")))?;
        let mut row = Vec::new();
        let mut last = 0usize;
        for token in tokens {
            let (idx_str, value_str) = token
                .split_once(':')
                .ok_or_else(|| malformed(format!("expected idx:value, got {token:?}")))?;
            let idx: usize = idx_str
                .parse()
                .map_err(|_| malformed(format!("bad feature index {idx_str:?}")))?;
            if idx == 0 {
                return Err(malformed("feature indices are 1-based".into()));
            }
            if idx <= last {
                return Err(malformed(format!("feature index {idx} not increasing")));
            }
            let value: f64 = value_str
                .parse()
                .map_err(|_| malformed(format!("bad feature value {value_str:?}")))?;
            if !value.is_finite() {
                return Err(malformed(format!("non-finite feature value {value}")));
            }
            row.push((idx - 1, value));
            last = idx;
            dim = dim.max(idx);
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "empty file".into(),
        });
    }
    Dataset::new(rows, labels, dim)
}

/// Families of synthetic problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Real targets `b = a'w* + noise * xi`.
    LeastSquares,
    /// Labels `sign(a'w* + noise * xi)`; with `noise = 0` rows are resampled
    /// until `|a'w*| >= 0.1 |w*|`, so the data is separable with a margin.
    Logistic,
    /// `classes` planted linear score rows; labels are the arg-max score,
    /// each flipped to a uniform class with probability `noise`.
    CrossEntropy { classes: usize },
}

/// A synthetic dataset together with its planted parameters
/// (one row for the scalar families, `classes` rows for cross-entropy).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub planted: Array2<f64>,
}

/// Draw `n` standard-normal feature rows and label them from a planted
/// linear model. Deterministic in `seed`.
pub fn synth_dataset(kind: SynthKind, n: usize, d: usize, seed: u64, noise: f64) -> Result<SynthDataset> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig("need n >= 1 and d >= 1".into()));
    }
    if noise < 0.0 || !noise.is_finite() {
        return Err(Error::InvalidConfig(format!("noise must be >= 0, got {noise}")));
    }
    if let SynthKind::CrossEntropy { classes } = kind {
        if classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if noise > 1.0 {
            return Err(Error::InvalidConfig(
                "cross-entropy noise is a flip probability and must be <= 1".into(),
            ));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let score_rows = match kind {
        SynthKind::CrossEntropy { classes } => classes,
        _ => 1,
    };
    let mut planted = Array2::zeros((score_rows, d));
    for k in 0..score_rows {
        for j in 0..d {
            planted[[k, j]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let planted_norm = planted.row(0).dot(&planted.row(0)).sqrt();

    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        loop {
            for j in 0..d {
                features[[i, j]] = rng.sample::<f64, _>(StandardNormal);
            }
            let row = features.row(i);
            match kind {
                SynthKind::LeastSquares => {
                    let mut target = planted.row(0).dot(&row);
                    if noise > 0.0 {
                        target += noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    labels.push(target);
                }
                SynthKind::Logistic => {
                    let mut margin = planted.row(0).dot(&row);
                    if noise > 0.0 {
                        margin += noise * rng.sample::<f64, _>(StandardNormal);
                    } else if margin.abs() < 0.1 * planted_norm {
                        continue; // resample for a clean separation margin
                    }
                    labels.push(if margin >= 0.0 { 1.0 } else { -1.0 });
                }
                SynthKind::CrossEntropy { classes } => {
                    let mut best = 0usize;
                    let mut best_score = f64::NEG_INFINITY;
                    for k in 0..classes {
                        let score = planted.row(k).dot(&row);
                        if score > best_score {
                            best_score = score;
                            best = k;
                        }
                    }
                    if noise > 0.0 && rng.random_range(0.0..1.0) < noise {
                        best = rng.random_range(0..classes);
                    }
                    labels.push(best as f64);
                }
            }
            break;
        }
    }
    Ok(SynthDataset {
        dataset: Dataset::from_dense(&features, labels)?,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_one_based_sparse_rows() {
        let f = write_temp("+1 3:2.5 7:-1\n-1 1:0.5\n");
        let data = parse_libsvm(f.path()).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.dim(), 7);
        assert_eq!(data.label(0), 1.0);
        assert_eq!(data.row(0), &[(2, 2.5), (6, -1.0)]);
        assert_eq!(data.row(1), &[(0, 0.5)]);
    }

    #[test]
    fn reports_malformed_lines_with_numbers() {
        for (content, bad_line) in [
            ("+1 1:1.0\nabc 1:1.0\n", 2),
            ("+1 1:x\n", 1),
            ("+1 0:1.0\n", 1),
            ("+1 2:1.0 1:3.0\n", 1),
            ("\n", 1),
        ] {
            let f = write_temp(content);
            match parse_libsvm(f.path()) {
                Err(Error::Parse { line, .. }) => {
                    assert_eq!(line, bad_line, "wrong line for {content:?}")
                }
                other => panic!("expected parse error for {content:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_temp("");
        assert!(matches!(parse_libsvm(f.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_non_finite_and_unsorted_rows() {
        assert!(Dataset::new(vec![vec![(0, f64::NAN)]], vec![1.0], 1).is_err());
        assert!(Dataset::new(vec![vec![(1, 1.0), (0, 1.0)]], vec![1.0], 2).is_err());
        assert!(Dataset::new(vec![vec![(5, 1.0)]], vec![1.0], 2).is_err());
        assert!(Dataset::new(vec![vec![(0, 1.0)]], vec![f64::INFINITY], 1).is_err());
    }

    #[test]
    fn synthetic_generation_is_deterministic_in_the_seed() {
        let a = synth_dataset(SynthKind::LeastSquares, 20, 5, 42, 0.1).unwrap();
        let b = synth_dataset(SynthKind::LeastSquares, 20, 5, 42, 0.1).unwrap();
        let c = synth_dataset(SynthKind::LeastSquares, 20, 5, 43, 0.1).unwrap();
        assert_eq!(a.dataset.labels(), b.dataset.labels());
        assert_eq!(a.planted, b.planted);
        assert_ne!(a.dataset.labels(), c.dataset.labels());
    }

    #[test]
    fn noiseless_logistic_has_a_margin() {
        let synth = synth_dataset(SynthKind::Logistic, 50, 8, 3, 0.0).unwrap();
        let w = synth.planted.row(0).to_owned();
        let norm = w.dot(&w).sqrt();
        for i in 0..synth.dataset.n() {
            let margin = synth.dataset.row_dot(i, &w) * synth.dataset.label(i);
            assert!(
                margin >= 0.1 * norm - 1e-12,
                "row {i} has margin {margin} below the guarantee"
            );
        }
    }

    #[test]
    fn cross_entropy_labels_are_argmax_scores_when_clean() {
        let synth = synth_dataset(SynthKind::CrossEntropy { classes: 4 }, 30, 6, 9, 0.0).unwrap();
        for i in 0..synth.dataset.n() {
            let row = synth.dataset.row_dense(i);
            let scores: Vec<f64> = (0..4).map(|k| synth.planted.row(k).dot(&row)).collect();
            let argmax = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(synth.dataset.label(i) as usize, argmax);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let synth = synth_dataset(SynthKind::LeastSquares, 25, 4, 1, 0.0).unwrap();
        let (train_a, test_a) = synth.dataset.split(0.2, 7).unwrap();
        let (train_b, test_b) = synth.dataset.split(0.2, 7).unwrap();
        assert_eq!(test_a.n(), 5);
        assert_eq!(train_a.n(), 20);
        assert_eq!(train_a.labels(), train_b.labels());
        assert_eq!(test_a.labels(), test_b.labels());
    }
}
