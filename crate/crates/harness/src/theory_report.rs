//! The numeric battery behind `check-theory`: desk-scale instances of the
//! convergence-analysis inequalities, evaluated on the configured problem
//! with constants measured from the run itself.
//!
//! Exhaustive checks (variance, batch-gradient norm) run on a small
//! sub-problem so subset expectations stay exact; operator checks
//! (eigenvalue envelopes, pair ratios) snapshot a short instrumented run;
//! the plateau ordering replays the configured step-size grid. Checks that
//! need structure the config lacks are skipped with an explanatory line,
//! never silently.

use ndarray::Array1;

use slbfgs::curvature::DEFAULT_EPSILON;
use slbfgs::optimizer::{
    run_observed, CurvatureAt, NoopObserver, RunSettings, StepInfo, StepObserver, Variant,
};
use slbfgs::problems::{BatchSpec, Dataset, ProblemOracle};
use slbfgs::theory::{
    admissible_alpha, check_batch_gradient_bound, check_eigen_bounds, check_neighborhood,
    check_pair_bounds, check_variance_bound, dense_ggn, dense_hessian, eigen_range,
    materialize_h, mean_plateau, AlphaRuns, CheckReport, PairStats, PlateauAxis, TheoryConstants,
    MAX_DENSE_DIM,
};
use slbfgs::two_loop::InitialScale;
use slbfgs::{Error, Result};

use crate::config::{ExperimentConfig, ProblemKind};
use crate::problem::{build_problem, oracle_for, source_data};
use crate::reference::compute_reference;

/// Step count targeted by the instrumented run behind the operator checks.
const TRACE_STEPS: usize = 60;
/// Sample count of the exhaustive sub-problems (subset counts stay small).
const EXHAUSTIVE_SAMPLES: usize = 8;

/// Everything the battery produced: gating reports plus context lines.
#[derive(Debug)]
pub struct TheoryOutcome {
    pub reports: Vec<CheckReport>,
    pub infos: Vec<String>,
}

impl TheoryOutcome {
    /// All gating reports passed (vacuously true when every check was
    /// toggled off or skipped).
    pub fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed)
    }

    /// Printable lines: one summary per report with its notes indented,
    /// then the context lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for report in &self.reports {
            out.push(report.summary());
            for note in &report.notes {
                if !note.is_empty() {
                    out.push(format!("  {note}"));
                }
            }
        }
        out.extend(self.infos.iter().cloned());
        out
    }
}

/// Snapshots one optimizer run: per-step batch-curvature extremes, initial
/// scale extremes, accepted pairs, and the post-push memory states.
struct CurvatureTrace<'a> {
    oracle: &'a ProblemOracle,
    curvature_at: CurvatureAt,
    use_ggn: bool,
    snaps: Vec<(slbfgs::curvature::LbfgsMemory, InitialScale)>,
    pairs: Vec<PairStats>,
    curv_min: f64,
    curv_max: f64,
    scale_min: f64,
    scale_max: f64,
    error: Option<Error>,
}

impl<'a> CurvatureTrace<'a> {
    fn new(oracle: &'a ProblemOracle, curvature_at: CurvatureAt, use_ggn: bool) -> Self {
        CurvatureTrace {
            oracle,
            curvature_at,
            use_ggn,
            snaps: Vec::new(),
            pairs: Vec::new(),
            curv_min: f64::INFINITY,
            curv_max: f64::NEG_INFINITY,
            scale_min: f64::INFINITY,
            scale_max: f64::NEG_INFINITY,
            error: None,
        }
    }
}

impl StepObserver for CurvatureTrace<'_> {
    fn on_step(&mut self, info: &StepInfo<'_>) {
        if self.error.is_some() {
            return;
        }
        // Measure the batch curvature matrix at the point the pair rule
        // evaluated it, so the extremes genuinely cover every stored pair.
        let point = match self.curvature_at {
            CurvatureAt::StepStart => info.w,
            CurvatureAt::StepEnd => info.w_next,
        };
        let dense = if self.use_ggn {
            dense_ggn(self.oracle, point, info.batch)
        } else {
            dense_hessian(self.oracle, point, info.batch)
        };
        match dense.and_then(|m| eigen_range(&m)) {
            Ok((lo, hi)) => {
                self.curv_min = self.curv_min.min(lo);
                self.curv_max = self.curv_max.max(hi);
            }
            Err(e) => {
                self.error = Some(e);
                return;
            }
        }
        let (lo, hi) = info.scale.bounds();
        self.scale_min = self.scale_min.min(lo);
        self.scale_max = self.scale_max.max(hi);
        if let Some(pair) = info.pair {
            if pair.accepted {
                self.pairs
                    .push(PairStats::from_vectors(&pair.s.view(), &pair.y.view()));
            }
        }
        if let Some(memory) = info.memory {
            self.snaps.push((memory.clone(), info.scale.clone()));
        }
    }
}

/// Run the configured battery. Hard errors mean the battery could not run
/// (bad config, unreadable data); failed inequalities land in the reports.
pub fn run_theory_checks(config: &ExperimentConfig) -> Result<TheoryOutcome> {
    let built = build_problem(&config.problem)?;
    let oracle = &built.oracle;
    let toggles = config.theory;
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut infos: Vec<String> = Vec::new();

    if toggles.variance {
        check_variance(oracle, &mut reports)?;
    }
    if toggles.batch_gradient {
        check_batch_gradient(config, oracle, &mut reports, &mut infos)?;
    }
    if toggles.eigen || toggles.pairs {
        check_operators(config, oracle, &mut reports, &mut infos)?;
    }
    if toggles.neighborhood {
        check_plateaus(config, oracle, &mut reports, &mut infos)?;
    }
    Ok(TheoryOutcome { reports, infos })
}

/// Exhaustive variance bound over the first few per-sample gradients at the
/// starting point, for every batch size.
fn check_variance(oracle: &ProblemOracle, reports: &mut Vec<CheckReport>) -> Result<()> {
    let k = oracle.n_samples().min(EXHAUSTIVE_SAMPLES);
    let w0 = oracle.initial_point(0);
    let mut xs = Vec::with_capacity(k);
    for i in 0..k {
        xs.push(oracle.batch_gradient(&w0, &BatchSpec::from_indices(vec![i])?)?);
    }
    for b in 1..=k {
        reports.push(check_variance_bound(&xs, b)?);
    }
    Ok(())
}

/// Certified `(lambda, smoothness)` for the convex families: a strong
/// convexity floor of the full objective and a per-component curvature cap.
fn convex_extremes(
    kind: ProblemKind,
    data: &Dataset,
    oracle: &ProblemOracle,
) -> Result<Option<(f64, f64)>> {
    let reg = oracle.regularization();
    if reg <= 0.0 {
        return Ok(None);
    }
    let max_row_sq = (0..data.n())
        .map(|i| data.row(i).iter().map(|&(_, v)| v * v).sum::<f64>())
        .fold(0.0f64, f64::max);
    match kind {
        ProblemKind::Logistic => Ok(Some((reg, 0.25 * max_row_sq + reg))),
        ProblemKind::LeastSquares => {
            // The Hessian is constant; its smallest eigenvalue is the exact
            // strong-convexity constant when the dimension permits a dense
            // assembly, and `reg` is a valid floor otherwise.
            let lambda = if oracle.dim() <= MAX_DENSE_DIM {
                let w0 = oracle.initial_point(0);
                let full = BatchSpec::full(oracle.n_samples());
                eigen_range(&dense_hessian(oracle, &w0, &full)?)?.0
            } else {
                reg
            };
            Ok(Some((lambda, max_row_sq + reg)))
        }
        ProblemKind::CrossEntropy => Ok(None),
    }
}

/// Exhaustive expected-batch-gradient-norm bound on a small sub-problem
/// around its own certified minimizer.
fn check_batch_gradient(
    config: &ExperimentConfig,
    oracle: &ProblemOracle,
    reports: &mut Vec<CheckReport>,
    infos: &mut Vec<String>,
) -> Result<()> {
    if !oracle.is_convex() || config.problem.kind == ProblemKind::CrossEntropy {
        infos.push(
            "batch-gradient bound skipped: needs a logistic or least-squares objective".into(),
        );
        return Ok(());
    }
    let (train, _) = source_data(&config.problem)?;
    let k = train.n().min(EXHAUSTIVE_SAMPLES);
    let idx: Vec<usize> = (0..k).collect();
    let sub_data = train.subset(&idx)?;
    let Some((lambda, smoothness)) =
        convex_extremes(config.problem.kind, &sub_data, oracle)?
    else {
        infos.push("batch-gradient bound skipped: needs positive regularization".into());
        return Ok(());
    };
    let sub = oracle_for(&config.problem, sub_data, oracle.regularization())?;
    let reference = compute_reference(&sub)?;
    if !reference.certified {
        infos.push("batch-gradient bound skipped: sub-problem reference not certified".into());
        return Ok(());
    }
    let d = sub.dim();
    // The minimizer, the start, and two fixed offsets around them.
    let ws = vec![
        reference.w_star.clone(),
        sub.initial_point(0),
        &reference.w_star
            + &Array1::from_shape_fn(d, |j| if j % 2 == 0 { 0.3 } else { -0.3 }),
        &reference.w_star - &Array1::from_elem(d, 0.2),
    ];
    let b = config.optimizer.batches[0].clamp(1, k);
    reports.push(check_batch_gradient_bound(
        &sub,
        &ws,
        b,
        &reference.w_star,
        lambda,
        smoothness,
    )?);
    Ok(())
}

/// Instrumented short run: materialized-operator eigenvalue envelopes and
/// per-pair curvature ratios, with the constants measured along the way.
fn check_operators(
    config: &ExperimentConfig,
    oracle: &ProblemOracle,
    reports: &mut Vec<CheckReport>,
    infos: &mut Vec<String>,
) -> Result<()> {
    let toggles = config.theory;
    let Some(variant) = config
        .variants()?
        .into_iter()
        .find(|v| matches!(v, Variant::LbfgsH | Variant::LbfgsF))
    else {
        infos.push("operator checks skipped: need lbfgs-h or lbfgs-f in the variant list".into());
        return Ok(());
    };
    let d = oracle.dim();
    if d > MAX_DENSE_DIM {
        infos.push(format!(
            "operator checks skipped: dense assembly is limited to dimension {MAX_DENSE_DIM}, \
             problem has {d}"
        ));
        return Ok(());
    }
    let grid = &config.optimizer;
    let batch = grid.batches[0].clamp(1, oracle.n_samples());
    let memory = grid.memories[0];
    let opt = config.optimizer_config(variant, grid.alphas[0], batch, memory, config.run.seeds[0], 1);
    let steps_per_epoch = oracle.n_samples().div_ceil(batch);
    let epochs = TRACE_STEPS.div_ceil(steps_per_epoch).min(TRACE_STEPS);

    let use_ggn = variant == Variant::LbfgsF;
    let mut trace = CurvatureTrace::new(oracle, opt.curvature_at, use_ggn);
    let record = run_observed(oracle, &opt, epochs, RunSettings::default(), &mut trace)?;
    if let Some(error) = trace.error {
        return Err(error);
    }
    if let Some(diverged) = &record.diverged {
        infos.push(format!(
            "operator checks skipped: the instrumented run diverged at step {} ({})",
            diverged.step, diverged.reason
        ));
        return Ok(());
    }

    let epsilon = grid.epsilon.unwrap_or(DEFAULT_EPSILON);
    if toggles.eigen {
        match TheoryConstants::new(
            trace.curv_min,
            trace.curv_max,
            trace.curv_min,
            trace.curv_max,
            trace.scale_min,
            trace.scale_max,
            epsilon,
            d,
            memory,
        ) {
            Ok(constants) => {
                let mut hs = Vec::with_capacity(trace.snaps.len());
                for (mem, scale) in &trace.snaps {
                    hs.push(materialize_h(mem, scale, d)?);
                }
                reports.push(check_eigen_bounds(&hs, &constants)?);
                infos.push(format!(
                    "measured curvature range [{:.3e}, {:.3e}], scale range [{:.3e}, {:.3e}]",
                    trace.curv_min, trace.curv_max, trace.scale_min, trace.scale_max
                ));
                infos.push(format!(
                    "admissible constant step (measured constants): {:.3e}",
                    admissible_alpha(&constants, oracle.n_samples(), batch)
                ));
            }
            Err(e) => infos.push(format!("eigenvalue bounds skipped: {e}")),
        }
    }
    if toggles.pairs {
        if trace.pairs.is_empty() {
            infos.push("pair bounds skipped: no accepted pairs in the instrumented run".into());
        } else {
            // Strongly convex curvature floors every quotient; cautious
            // acceptance only guarantees the threshold on nonconvex runs.
            let lower = if oracle.is_convex() {
                trace.curv_min
            } else {
                epsilon
            };
            reports.push(check_pair_bounds(&trace.pairs, lower, trace.curv_max));
        }
    }
    Ok(())
}

/// Plateau ordering across the configured step sizes, on the suboptimality
/// axis when the reference is certified and the squared-gradient axis
/// otherwise.
fn check_plateaus(
    config: &ExperimentConfig,
    oracle: &ProblemOracle,
    reports: &mut Vec<CheckReport>,
    infos: &mut Vec<String>,
) -> Result<()> {
    let grid = &config.optimizer;
    if grid.alphas.len() < 2 {
        infos.push("plateau ordering skipped: needs at least two step sizes".into());
        return Ok(());
    }
    let reference = compute_reference(oracle)?;
    let axis = if reference.certified {
        PlateauAxis::Suboptimality(reference.f_star)
    } else {
        infos.push("plateau ordering uses the squared-gradient axis (no certified minimum)".into());
        PlateauAxis::SquaredGradient
    };
    let variant = config.variants()?[0];
    let batch = grid.batches[0].clamp(1, oracle.n_samples());
    let memory = grid.memories[0];
    let mut families = Vec::with_capacity(grid.alphas.len());
    for &alpha in &grid.alphas {
        let mut records = Vec::with_capacity(config.run.seeds.len());
        for &seed in &config.run.seeds {
            let opt = config.optimizer_config(variant, alpha, batch, memory, seed, 1);
            records.push(run_observed(
                oracle,
                &opt,
                config.run.epochs,
                RunSettings::default(),
                &mut NoopObserver,
            )?);
        }
        if reference.certified {
            infos.push(format!(
                "plateau(alpha={alpha}) = {:.3e} over {} seeds",
                mean_plateau(&records, reference.f_star),
                records.len()
            ));
        }
        families.push(AlphaRuns { alpha, records });
    }
    reports.push(check_neighborhood(&families, axis)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::config::ExperimentConfig;

    #[test]
    fn the_full_battery_passes_on_a_small_logistic_problem() {
        let doc = "[problem]\nkind = \"logistic\"\nregularization = 0.05\n\
                   test_fraction = 0.0\n[problem.synth]\nn = 40\nd = 4\nnoise = 0.2\n\
                   [optimizer]\nvariants = [\"lbfgs-h\"]\nalphas = [0.1, 0.025]\n\
                   batches = [8]\nmemories = [4]\n[run]\nepochs = 5\nseeds = [0, 1]\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let outcome = run_theory_checks(&config).unwrap();
        assert!(
            outcome.passed(),
            "battery failed:\n{}",
            outcome.lines().join("\n")
        );
        // 8 variance reports, the batch-gradient bound, the eigen and pair
        // reports, and the (inconclusive, 2-seed) plateau ordering.
        assert_eq!(outcome.reports.len(), 12);
        assert!(outcome
            .lines()
            .iter()
            .any(|l| l.contains("inconclusive")));
    }

    #[test]
    fn toggled_off_checks_produce_no_reports() {
        let doc = "[problem]\nkind = \"least-squares\"\ntest_fraction = 0.0\n\
                   [problem.synth]\nn = 20\nd = 3\n\
                   [optimizer]\nvariants = [\"sgd\"]\nalphas = [0.05]\nbatches = [4]\n\
                   memories = [0]\n[run]\nepochs = 2\n\
                   [theory]\nvariance = false\nbatch_gradient = false\neigen = false\n\
                   pairs = false\nneighborhood = false\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let outcome = run_theory_checks(&config).unwrap();
        assert!(outcome.reports.is_empty());
        assert!(outcome.passed());
    }

    #[test]
    fn nonconvex_battery_uses_the_cautious_floor_and_gradient_axis() {
        let doc = "[problem]\nkind = \"cross-entropy\"\nhidden = 4\nregularization = 0.01\n\
                   test_fraction = 0.0\n[problem.synth]\nn = 30\nd = 4\nclasses = 3\n\
                   [optimizer]\nvariants = [\"lbfgs-f\"]\nalphas = [0.2, 0.05]\n\
                   batches = [10]\nmemories = [3]\n[run]\nepochs = 4\nseeds = [0]\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let outcome = run_theory_checks(&config).unwrap();
        assert!(
            outcome.passed(),
            "battery failed:\n{}",
            outcome.lines().join("\n")
        );
        // The batch-gradient bound is skipped for the nonconvex family,
        // with a line saying so.
        assert!(outcome
            .lines()
            .iter()
            .any(|l| l.contains("batch-gradient bound skipped")));
        assert!(outcome
            .lines()
            .iter()
            .any(|l| l.contains("squared-gradient axis")));
    }

    #[test]
    fn baseline_only_grids_skip_the_operator_checks() {
        let doc = "[problem]\nkind = \"logistic\"\ntest_fraction = 0.0\n\
                   [problem.synth]\nn = 20\nd = 3\n\
                   [optimizer]\nvariants = [\"adam\"]\nalphas = [0.05]\nbatches = [4]\n\
                   memories = [0]\n[run]\nepochs = 2\n\
                   [theory]\nvariance = false\nbatch_gradient = false\nneighborhood = false\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let outcome = run_theory_checks(&config).unwrap();
        assert!(outcome.reports.is_empty());
        assert!(outcome
            .lines()
            .iter()
            .any(|l| l.contains("need lbfgs-h or lbfgs-f")));
    }
}
