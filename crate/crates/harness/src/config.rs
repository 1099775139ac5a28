//! The experiment document: one TOML file describing the problem, the
//! optimizer grid, run bookkeeping, and which analysis checks to run.
//!
//! Every field that has a sensible default is optional in the document, so a
//! minimal experiment is just a problem table, a variant list, and an epoch
//! count. Validation is eager and happens once, before any compute: a config
//! error exits the CLI with status 1, never mid-grid.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use slbfgs::optimizer::{CurvatureAt, LrSchedule, OptimizerConfig, Precond, Variant};
use slbfgs::problems::GgnForm;
use slbfgs::{Error, Result};

/// Fraction of samples held out for the test column when the document does
/// not say otherwise.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Root of the experiment document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub optimizer: OptimizerGrid,
    pub run: RunConfig,
    #[serde(default)]
    pub theory: TheoryToggles,
}

/// Which objective to optimize and where its data comes from.
///
/// Exactly one of `dataset` (a libsvm-format file) and `synth` (a planted
/// generator) must be present.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// L2 coefficient; defaults to `1/n_train`.
    #[serde(default)]
    pub regularization: Option<f64>,
    /// Hidden width for `cross-entropy`; `0` gives the linear softmax model.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub ggn_form: GgnFormConfig,
    /// Held-out fraction in `[0, 1)`; `0` disables the test column.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed for the shuffle that splits a file dataset.
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Logistic,
    LeastSquares,
    CrossEntropy,
}

/// Planted-model generator settings (`n` is the training-set size; held-out
/// rows are drawn on top of it from the same model).
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Class count for `cross-entropy` data.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

/// Gauss-Newton flavour for the cross-entropy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GgnFormConfig {
    #[default]
    Softmax,
    DiagonalProbability,
}

impl From<GgnFormConfig> for GgnForm {
    fn from(form: GgnFormConfig) -> GgnForm {
        match form {
            GgnFormConfig::Softmax => GgnForm::Softmax,
            GgnFormConfig::DiagonalProbability => GgnForm::DiagonalProbability,
        }
    }
}

/// The optimizer sweep: the cross product of `variants x alphas x batches x
/// memories` (times the seed list in `[run]`) is one run each.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerGrid {
    /// Variant names as accepted by the optimizer (`lbfgs-h`, `lbfgs-f`,
    /// `lbfgs-s`, `lbfgs-classic`, `sgd`, `adam`, `adagrad`).
    pub variants: Vec<String>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_batches")]
    pub batches: Vec<usize>,
    #[serde(default = "default_memories")]
    pub memories: Vec<usize>,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// Offset `k0` of the decaying schedule `alpha / (k + k0)`.
    #[serde(default = "default_decay_offset")]
    pub decay_offset: f64,
    /// Cautious-acceptance threshold; optimizer default when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Momentum for the `sgd` baseline; optimizer default when absent.
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub curvature_at: CurvatureAtConfig,
    #[serde(default)]
    pub precond: PrecondConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Decaying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureAtConfig {
    #[default]
    StepStart,
    StepEnd,
}

impl From<CurvatureAtConfig> for CurvatureAt {
    fn from(at: CurvatureAtConfig) -> CurvatureAt {
        match at {
            CurvatureAtConfig::StepStart => CurvatureAt::StepStart,
            CurvatureAtConfig::StepEnd => CurvatureAt::StepEnd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondConfig {
    #[default]
    Adam,
    Identity,
}

impl From<PrecondConfig> for Precond {
    fn from(p: PrecondConfig) -> Precond {
        match p {
            PrecondConfig::Adam => Precond::Adam,
            PrecondConfig::Identity => Precond::Identity,
        }
    }
}

/// Run bookkeeping: repetitions, output location and format, and the
/// simulated data-parallel width.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<OutputFormat>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub placement: PlacementConfig,
}

/// On-disk format of the per-run records; aggregates follow the same choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementConfig {
    #[default]
    RoundRobin,
    PerDotProduct,
}

/// Which analysis checks `check-theory` runs; all on by default.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryToggles {
    /// Exhaustive sampling-without-replacement variance bound.
    pub variance: bool,
    /// Expected-batch-gradient-norm bound at points along a run.
    pub batch_gradient: bool,
    /// Eigenvalue envelope of the materialized inverse-Hessian operators.
    pub eigen: bool,
    /// Rayleigh-quotient bounds on the stored curvature pairs.
    pub pairs: bool,
    /// Plateau ordering across step sizes and the decay-slope fit.
    pub neighborhood: bool,
}

impl Default for TheoryToggles {
    fn default() -> Self {
        TheoryToggles {
            variance: true,
            batch_gradient: true,
            eigen: true,
            pairs: true,
            neighborhood: true,
        }
    }
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

fn default_noise() -> f64 {
    0.1
}

fn default_classes() -> usize {
    3
}

fn default_alphas() -> Vec<f64> {
    vec![0.025]
}

fn default_batches() -> Vec<usize> {
    vec![64]
}

fn default_memories() -> Vec<usize> {
    vec![10]
}

fn default_decay_offset() -> f64 {
    4.0
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    /// Parse a TOML document and validate it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Read and parse the document at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    /// Check every invariant that does not require touching the data.
    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        match (&p.dataset, &p.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "problem has both a dataset file and a synth table; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "problem needs either a dataset file or a synth table".into(),
                ))
            }
            _ => {}
        }
        if let Some(synth) = &p.synth {
            if synth.n == 0 || synth.d == 0 {
                return Err(Error::InvalidConfig("synth needs n >= 1 and d >= 1".into()));
            }
            if synth.noise < 0.0 || !synth.noise.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "synth noise must be >= 0, got {}",
                    synth.noise
                )));
            }
            if p.kind == ProblemKind::CrossEntropy && synth.classes < 2 {
                return Err(Error::InvalidConfig("synth needs at least 2 classes".into()));
            }
        }
        if let Some(reg) = p.regularization {
            if reg < 0.0 || !reg.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "regularization must be >= 0, got {reg}"
                )));
            }
        }
        if !(0.0..1.0).contains(&p.test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction must be in [0, 1), got {}",
                p.test_fraction
            )));
        }
        if p.hidden.is_some() && p.kind != ProblemKind::CrossEntropy {
            return Err(Error::InvalidConfig(
                "hidden only applies to the cross-entropy problem".into(),
            ));
        }

        let grid = &self.optimizer;
        if grid.variants.is_empty() {
            return Err(Error::InvalidConfig("optimizer.variants is empty".into()));
        }
        for name in &grid.variants {
            Variant::parse(name)?;
        }
        if grid.alphas.is_empty() || grid.batches.is_empty() || grid.memories.is_empty() {
            return Err(Error::InvalidConfig(
                "optimizer.alphas, .batches, and .memories must each be non-empty".into(),
            ));
        }
        for &alpha in &grid.alphas {
            if alpha <= 0.0 || !alpha.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "step sizes must be positive, got {alpha}"
                )));
            }
        }
        for &b in &grid.batches {
            if b == 0 {
                return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
            }
        }
        if grid.decay_offset <= 0.0 || !grid.decay_offset.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "decay_offset must be positive, got {}",
                grid.decay_offset
            )));
        }

        let run = &self.run;
        if run.epochs == 0 {
            return Err(Error::InvalidConfig("run.epochs must be >= 1".into()));
        }
        if run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds is empty".into()));
        }
        if run.workers == 0 {
            return Err(Error::InvalidConfig("run.workers must be >= 1".into()));
        }
        if run.workers > 1 {
            for name in &grid.variants {
                if Variant::parse(name)? != Variant::LbfgsF {
                    return Err(Error::InvalidConfig(format!(
                        "workers > 1 simulates the sharded Gauss-Newton path, which only \
                         lbfgs-f uses; remove {name} or set workers = 1"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Concrete optimizer settings for one grid cell. `workers` is the
    /// effective width after CLI overrides.
    pub fn optimizer_config(
        &self,
        variant: Variant,
        alpha: f64,
        batch: usize,
        memory: usize,
        seed: u64,
        workers: usize,
    ) -> OptimizerConfig {
        let grid = &self.optimizer;
        let mut config = OptimizerConfig::new(variant);
        config.memory = memory;
        config.batch = batch;
        config.schedule = match grid.schedule {
            ScheduleKind::Constant => LrSchedule::Constant(alpha),
            ScheduleKind::Decaying => LrSchedule::Decaying {
                alpha,
                offset: grid.decay_offset,
            },
        };
        if let Some(epsilon) = grid.epsilon {
            config.epsilon = epsilon;
        }
        if let Some(momentum) = grid.momentum {
            config.momentum = momentum;
        }
        config.curvature_at = grid.curvature_at.into();
        config.precond = grid.precond.into();
        config.workers = if variant == Variant::LbfgsF { workers } else { 1 };
        config.placement = match self.run.placement {
            PlacementConfig::RoundRobin => slbfgs::distributed::PairPlacement::RoundRobin,
            PlacementConfig::PerDotProduct => slbfgs::distributed::PairPlacement::PerDotProduct,
        };
        config.seed = seed;
        config
    }

    /// Parsed variant list (validated, so parsing cannot fail afterwards).
    pub fn variants(&self) -> Result<Vec<Variant>> {
        self.optimizer.variants.iter().map(|s| Variant::parse(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        "\
[problem]\n\
kind = \"logistic\"\n\
[problem.synth]\n\
n = 100\n\
d = 5\n\
[optimizer]\n\
variants = [\"lbfgs-h\"]\n\
[run]\n\
epochs = 3\n"
            .to_string()
    }

    #[test]
    fn minimal_document_fills_every_default() {
        let config = ExperimentConfig::from_toml(&minimal()).unwrap();
        assert_eq!(config.problem.test_fraction, DEFAULT_TEST_FRACTION);
        assert_eq!(config.optimizer.alphas, vec![0.025]);
        assert_eq!(config.optimizer.batches, vec![64]);
        assert_eq!(config.optimizer.memories, vec![10]);
        assert_eq!(config.run.seeds, vec![0]);
        assert_eq!(config.run.workers, 1);
        assert!(config.theory.variance && config.theory.neighborhood);
        assert_eq!(config.run.format, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = minimal() + "typo_key = 1\n";
        let err = ExperimentConfig::from_toml(&doc).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
    }

    #[test]
    fn dataset_and_synth_are_mutually_exclusive() {
        let doc = minimal().replace(
            "[problem.synth]",
            "dataset = \"some/file\"\n[problem.synth]",
        );
        let err = ExperimentConfig::from_toml(&doc).unwrap_err();
        assert!(err.to_string().contains("pick one"), "{err}");
    }

    #[test]
    fn grid_invariants_are_enforced() {
        let empty_variants = minimal().replace("[\"lbfgs-h\"]", "[]");
        assert!(ExperimentConfig::from_toml(&empty_variants).is_err());

        let bad_variant = minimal().replace("lbfgs-h", "lbfgs-x");
        assert!(ExperimentConfig::from_toml(&bad_variant).is_err());

        let zero_epochs = minimal().replace("epochs = 3", "epochs = 0");
        assert!(ExperimentConfig::from_toml(&zero_epochs).is_err());

        let empty_seeds = minimal() + "seeds = []\n";
        assert!(ExperimentConfig::from_toml(&empty_seeds).is_err());

        let negative_alpha = minimal() + "\n[theory]\n";
        assert!(ExperimentConfig::from_toml(&negative_alpha).is_ok());
    }

    #[test]
    fn workers_require_the_gauss_newton_variant() {
        let doc = minimal().replace("epochs = 3", "epochs = 3\nworkers = 4");
        let err = ExperimentConfig::from_toml(&doc).unwrap_err();
        assert!(err.to_string().contains("lbfgs-f"), "{err}");

        let ok = doc.replace("lbfgs-h", "lbfgs-f");
        assert!(ExperimentConfig::from_toml(&ok).is_ok());
    }

    #[test]
    fn grid_cell_maps_onto_optimizer_settings() {
        let doc = minimal().replace(
            "[optimizer]",
            "[optimizer]\nschedule = \"decaying\"\ndecay_offset = 7.0\nepsilon = 1e-6\n",
        );
        let config = ExperimentConfig::from_toml(&doc).unwrap();
        let opt = config.optimizer_config(Variant::LbfgsH, 0.5, 16, 3, 11, 1);
        assert_eq!(opt.batch, 16);
        assert_eq!(opt.memory, 3);
        assert_eq!(opt.seed, 11);
        assert_eq!(opt.epsilon, 1e-6);
        match opt.schedule {
            LrSchedule::Decaying { alpha, offset } => {
                assert_eq!(alpha, 0.5);
                assert_eq!(offset, 7.0);
            }
            other => panic!("expected a decaying schedule, got {other:?}"),
        }
        // Worker width only reaches the variant that shards.
        let sgd = config.optimizer_config(Variant::Sgd, 0.5, 16, 3, 11, 4);
        assert_eq!(sgd.workers, 1);
    }
}
