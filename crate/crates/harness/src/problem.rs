//! From problem description to oracle: data loading or generation, label
//! normalization, the train/test split, and the default regularization.

use slbfgs::problems::{
    parse_libsvm, synth_dataset, Dataset, LeastSquaresProblem, LogisticProblem, MlpProblem,
    ProblemOracle, SynthKind, DEFAULT_HIDDEN_WIDTH,
};
use slbfgs::{Error, Result};

use crate::config::{ProblemConfig, ProblemKind};

/// The oracle to optimize plus the held-out rows (if any) behind the
/// test-error column.
#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub oracle: ProblemOracle,
    pub test: Option<Dataset>,
}

impl BuiltProblem {
    pub fn test_data(&self) -> Option<&Dataset> {
        self.test.as_ref()
    }
}

/// Load or generate the `(train, test)` rows the config describes.
///
/// Synthetic problems draw `round(n * f / (1 - f))` extra held-out rows from
/// the same planted model, so the training set keeps its configured size.
/// File datasets are split by a seeded shuffle instead. Binary labels
/// `{0, 1}` in a file are remapped to the `{-1, +1}` convention the logistic
/// oracle expects.
pub fn source_data(config: &ProblemConfig) -> Result<(Dataset, Dataset)> {
    match (&config.synth, &config.dataset) {
        (Some(synth), None) => {
            let kind = match config.kind {
                ProblemKind::Logistic => SynthKind::Logistic,
                ProblemKind::LeastSquares => SynthKind::LeastSquares,
                ProblemKind::CrossEntropy => SynthKind::CrossEntropy {
                    classes: synth.classes,
                },
            };
            let f = config.test_fraction;
            let n_test = (synth.n as f64 * f / (1.0 - f)).round() as usize;
            let total = synth.n + n_test;
            let data = synth_dataset(kind, total, synth.d, synth.seed, synth.noise)?.dataset;
            let train_idx: Vec<usize> = (0..synth.n).collect();
            let test_idx: Vec<usize> = (synth.n..total).collect();
            Ok((data.subset(&train_idx)?, data.subset(&test_idx)?))
        }
        (None, Some(path)) => {
            let mut data = parse_libsvm(path)?;
            if config.kind == ProblemKind::Logistic {
                data = normalize_binary_labels(data)?;
            }
            data.split(config.test_fraction, config.split_seed)
        }
        // validate() has already rejected the other two combinations.
        _ => Err(Error::InvalidConfig(
            "problem needs exactly one data source".into(),
        )),
    }
}

/// Wrap training rows in the configured oracle with an explicit L2
/// coefficient (callers pick the default; sub-problems inherit the full
/// problem's value).
pub fn oracle_for(config: &ProblemConfig, train: Dataset, reg: f64) -> Result<ProblemOracle> {
    match config.kind {
        ProblemKind::Logistic => Ok(ProblemOracle::Logistic(LogisticProblem::new(train, reg)?)),
        ProblemKind::LeastSquares => Ok(ProblemOracle::LeastSquares(LeastSquaresProblem::new(
            train, reg,
        )?)),
        ProblemKind::CrossEntropy => {
            let classes = match config.synth {
                Some(synth) => synth.classes,
                None => infer_classes(&train)?,
            };
            let hidden = config.hidden.unwrap_or(DEFAULT_HIDDEN_WIDTH);
            Ok(ProblemOracle::CrossEntropyMlp(MlpProblem::new(
                train,
                reg,
                hidden,
                classes,
                config.ggn_form.into(),
            )?))
        }
    }
}

/// Build the oracle described by the config (see [`source_data`] for the
/// split conventions).
pub fn build_problem(config: &ProblemConfig) -> Result<BuiltProblem> {
    let (train, test) = source_data(config)?;
    let reg = config
        .regularization
        .unwrap_or_else(|| 1.0 / train.n() as f64);
    let oracle = oracle_for(config, train, reg)?;
    let test = if test.n() == 0 { None } else { Some(test) };
    Ok(BuiltProblem { oracle, test })
}

/// Map `{0, 1}` labels to `{-1, +1}`; pass `{-1, +1}` through untouched.
fn normalize_binary_labels(data: Dataset) -> Result<Dataset> {
    let labels = data.labels();
    if labels.iter().all(|&l| l == 1.0 || l == -1.0) {
        return Ok(data);
    }
    if labels.iter().all(|&l| l == 0.0 || l == 1.0) {
        let remapped: Vec<f64> = labels
            .iter()
            .map(|&l| if l == 0.0 { -1.0 } else { 1.0 })
            .collect();
        let rows = (0..data.n()).map(|i| data.row(i).to_vec()).collect();
        let dim = data.dim();
        return Dataset::new(rows, remapped, dim);
    }
    Err(Error::InvalidConfig(
        "logistic labels must be {-1,+1} or {0,1}".into(),
    ))
}

/// Largest class index plus one; labels themselves are validated by the
/// cross-entropy oracle.
fn infer_classes(data: &Dataset) -> Result<usize> {
    let max = data
        .labels()
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &l| acc.max(l));
    if !max.is_finite() || max < 1.0 {
        return Err(Error::InvalidConfig(
            "cross-entropy data must contain at least two classes".into(),
        ));
    }
    Ok(max as usize + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    use crate::config::ExperimentConfig;

    fn synth_doc(kind: &str, extra: &str) -> String {
        format!(
            "[problem]\nkind = \"{kind}\"\n{extra}[problem.synth]\nn = 40\nd = 4\n\
             [optimizer]\nvariants = [\"adam\"]\n[run]\nepochs = 1\n"
        )
    }

    #[test]
    fn synthetic_split_keeps_the_training_size() {
        let config = ExperimentConfig::from_toml(&synth_doc("logistic", "")).unwrap();
        let built = build_problem(&config.problem).unwrap();
        assert_eq!(built.oracle.n_samples(), 40);
        // 20% held out on top of n = 40 training rows.
        assert_eq!(built.test.as_ref().unwrap().n(), 10);
        // Default regularization is 1/n.
        assert!((built.oracle.regularization() - 1.0 / 40.0).abs() < 1e-15);
    }

    #[test]
    fn zero_fraction_disables_the_test_column() {
        let doc = synth_doc("least-squares", "test_fraction = 0.0\n");
        let config = ExperimentConfig::from_toml(&doc).unwrap();
        let built = build_problem(&config.problem).unwrap();
        assert!(built.test.is_none());
    }

    #[test]
    fn cross_entropy_synth_uses_the_configured_class_count() {
        let doc = synth_doc("cross-entropy", "hidden = 0\n").replace(
            "n = 40\nd = 4\n",
            "n = 40\nd = 4\nclasses = 5\n",
        );
        let config = ExperimentConfig::from_toml(&doc).unwrap();
        let built = build_problem(&config.problem).unwrap();
        // Linear softmax: d * classes weights plus classes biases.
        assert_eq!(built.oracle.dim(), 4 * 5 + 5);
    }

    #[test]
    fn file_labels_zero_one_are_remapped_for_logistic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.libsvm");
        let mut file = std::fs::File::create(&path).unwrap();
        for i in 0..10 {
            let label = i % 2;
            writeln!(file, "{label} 1:{}.0 2:-1.5", i + 1).unwrap();
        }
        drop(file);

        let doc = format!(
            "[problem]\nkind = \"logistic\"\ndataset = {:?}\ntest_fraction = 0.2\n\
             [optimizer]\nvariants = [\"adam\"]\n[run]\nepochs = 1\n",
            path.to_str().unwrap()
        );
        let config = ExperimentConfig::from_toml(&doc).unwrap();
        let built = build_problem(&config.problem).unwrap();
        assert_eq!(built.oracle.n_samples(), 8);
        assert_eq!(built.test.as_ref().unwrap().n(), 2);
        // The oracle validates the +-1 convention, so construction passing
        // proves the remap happened.
        assert!(matches!(built.oracle, ProblemOracle::Logistic(_)));
    }

    #[test]
    fn file_class_count_is_inferred_from_the_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.libsvm");
        let mut file = std::fs::File::create(&path).unwrap();
        for i in 0..12 {
            writeln!(file, "{} 1:0.5 3:1.0", i % 4).unwrap();
        }
        drop(file);

        let doc = format!(
            "[problem]\nkind = \"cross-entropy\"\ndataset = {:?}\nhidden = 0\n\
             test_fraction = 0.0\n[optimizer]\nvariants = [\"adam\"]\n[run]\nepochs = 1\n",
            path.to_str().unwrap()
        );
        let config = ExperimentConfig::from_toml(&doc).unwrap();
        let built = build_problem(&config.problem).unwrap();
        // dim = 3 features, 4 classes: linear softmax has 3*4 + 4 parameters.
        assert_eq!(built.oracle.dim(), 3 * 4 + 4);
    }
}
