//! The `selftest` battery: a seconds-scale sweep of the load-bearing
//! invariants, meant as a smoke test of a build rather than a benchmark.
//! Every item is deterministic; a failure message carries the measured
//! discrepancy.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use slbfgs::curvature::{LbfgsMemory, DEFAULT_EPSILON};
use slbfgs::distributed::expected_step_scalars;
use slbfgs::linalg;
use slbfgs::optimizer::{
    run, run_observed, OptimizerConfig, RunSettings, StepInfo, StepObserver, Variant,
};
use slbfgs::problems::{synth_dataset, LeastSquaresProblem, LogisticProblem, ProblemOracle, SynthKind};
use slbfgs::theory::{check_variance_bound, dense_h_from_memory, materialize_h};
use slbfgs::two_loop::{classic_two_loop, vector_free_two_loop, InitialScale};

/// One selftest item: pass with a detail line, or fail with a reason.
#[derive(Debug)]
pub struct SelftestItem {
    pub name: &'static str,
    pub outcome: std::result::Result<String, String>,
}

impl SelftestItem {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(detail) => format!("selftest: {} ok ({detail})", self.name),
            Err(reason) => format!("selftest: {} FAILED: {reason}", self.name),
        }
    }
}

fn item(
    name: &'static str,
    run: impl FnOnce() -> std::result::Result<String, String>,
) -> SelftestItem {
    SelftestItem {
        name,
        outcome: run(),
    }
}

fn random_vec(rng: &mut ChaCha20Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
}

/// Random bounded-curvature memory: `y = c .* s` with positive
/// coordinatewise factors, so every pair passes the acceptance test.
fn random_memory(
    rng: &mut ChaCha20Rng,
    d: usize,
    capacity: usize,
) -> std::result::Result<LbfgsMemory, String> {
    let mut memory = LbfgsMemory::new(capacity, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
    for _ in 0..capacity + 1 {
        let s = random_vec(rng, d);
        let y = Array1::from_shape_fn(d, |j| rng.random_range(0.5..2.0) * s[j]);
        memory.push_pair(s, y).map_err(|e| e.to_string())?;
    }
    Ok(memory)
}

fn recursions_agree() -> std::result::Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(2..=20);
        let capacity = rng.random_range(0..=5);
        let memory = random_memory(&mut rng, d, capacity)?;
        let h0 = InitialScale::Diagonal(Array1::from_shape_fn(d, |_| rng.random_range(0.5..2.0)));
        let g = random_vec(&mut rng, d);
        let classic = classic_two_loop(&memory, &g, &h0).map_err(|e| e.to_string())?;
        let free = vector_free_two_loop(&memory, &g, &h0).map_err(|e| e.to_string())?;
        worst = worst.max(linalg::rel_err_vec(&classic.view(), &free.direction.view()));
    }
    if worst <= 1e-10 {
        Ok(format!("50 instances, worst relative error {worst:.3e}"))
    } else {
        Err(format!("recursions disagree by {worst:.3e} > 1e-10"))
    }
}

fn materialization_matches_dense_formula() -> std::result::Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=6);
        let capacity = rng.random_range(0..=3);
        let memory = random_memory(&mut rng, d, capacity)?;
        let h0 = InitialScale::Uniform(rng.random_range(0.5..2.0));
        let probed = materialize_h(&memory, &h0, d).map_err(|e| e.to_string())?;
        let direct = dense_h_from_memory(&memory, &h0, d).map_err(|e| e.to_string())?;
        let scale = direct.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        let diff = (&probed - &direct)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(diff / scale);
    }
    if worst <= 1e-9 {
        Ok(format!("20 instances, worst relative entry error {worst:.3e}"))
    } else {
        Err(format!("materialization differs by {worst:.3e} > 1e-9"))
    }
}

fn zero_memory_is_adam() -> std::result::Result<String, String> {
    struct Trajectory(Vec<Array1<f64>>);
    impl StepObserver for Trajectory {
        fn on_step(&mut self, info: &StepInfo<'_>) {
            self.0.push(info.w_next.clone());
        }
    }
    let data = synth_dataset(SynthKind::Logistic, 30, 4, 2, 0.3)
        .map_err(|e| e.to_string())?
        .dataset;
    let oracle =
        ProblemOracle::Logistic(LogisticProblem::new(data, 0.05).map_err(|e| e.to_string())?);
    let mut adam = OptimizerConfig::new(Variant::Adam);
    adam.batch = 10;
    let mut zero = OptimizerConfig::new(Variant::LbfgsH);
    zero.batch = 10;
    zero.memory = 0;
    let mut ta = Trajectory(Vec::new());
    let mut tz = Trajectory(Vec::new());
    run_observed(&oracle, &adam, 3, RunSettings::default(), &mut ta).map_err(|e| e.to_string())?;
    run_observed(&oracle, &zero, 3, RunSettings::default(), &mut tz).map_err(|e| e.to_string())?;
    if ta.0 == tz.0 && !ta.0.is_empty() {
        Ok(format!("{} iterates bitwise equal", ta.0.len()))
    } else {
        Err("zero-memory quasi-Newton iterates differ from the ADAM baseline".into())
    }
}

fn ledger_matches_closed_form() -> std::result::Result<String, String> {
    let data = synth_dataset(SynthKind::Logistic, 24, 5, 3, 0.3)
        .map_err(|e| e.to_string())?
        .dataset;
    let oracle =
        ProblemOracle::Logistic(LogisticProblem::new(data, 0.05).map_err(|e| e.to_string())?);
    let mut config = OptimizerConfig::new(Variant::LbfgsF);
    config.batch = 8;
    config.memory = 3;
    config.workers = 4;
    let epochs = 2;
    let record = run(&oracle, &config, epochs).map_err(|e| e.to_string())?;
    if record.diverged.is_some() {
        return Err("ledger run unexpectedly diverged".into());
    }
    // Every pair is accepted here (regularized Gauss-Newton curvature), so
    // the effective memory at step k is min(k, capacity).
    let steps = epochs * 24usize.div_ceil(8);
    let expected: u64 = (0..steps)
        .map(|k| expected_step_scalars(5, 4, k.min(config.memory)).total())
        .sum();
    let actual = record.ledger.total_scalars();
    if actual == expected {
        Ok(format!("{steps} sharded steps, {actual} scalars"))
    } else {
        Err(format!("ledger counted {actual} scalars, closed form says {expected}"))
    }
}

fn variance_bound_holds() -> std::result::Result<String, String> {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let xs: Vec<Array1<f64>> = (0..6).map(|_| random_vec(&mut rng, 3)).collect();
    for b in 1..=6 {
        let report = check_variance_bound(&xs, b).map_err(|e| e.to_string())?;
        if !report.passed() {
            return Err(report.summary());
        }
    }
    Ok("n = 6 vectors, every batch size exhaustively".into())
}

fn reference_matches_normal_equations() -> std::result::Result<String, String> {
    let data = synth_dataset(SynthKind::LeastSquares, 10, 3, 4, 0.2)
        .map_err(|e| e.to_string())?
        .dataset;
    let reg = 0.1;
    let dense = data.to_dense();
    let labels = Array1::from_vec(data.labels().to_vec());
    let mut gram = dense.t().dot(&dense) / 10.0;
    for j in 0..3 {
        gram[[j, j]] += reg;
    }
    let rhs = dense.t().dot(&labels) / 10.0;
    let exact = linalg::solve(&gram.view(), &rhs.view()).map_err(|e| e.to_string())?;
    let oracle = ProblemOracle::LeastSquares(
        LeastSquaresProblem::new(data, reg).map_err(|e| e.to_string())?,
    );
    let reference = crate::reference::compute_reference(&oracle).map_err(|e| e.to_string())?;
    if !reference.certified {
        return Err("least-squares reference failed to certify".into());
    }
    let exact_loss = oracle.full_loss(&exact).map_err(|e| e.to_string())?;
    let diff = (reference.f_star - exact_loss).abs();
    if diff <= 1e-9 {
        Ok(format!("loss gap to the normal equations {diff:.3e}"))
    } else {
        Err(format!("reference loss differs by {diff:.3e} > 1e-9"))
    }
}

/// Run every item; the caller decides how to print and what exit code the
/// failures deserve.
pub fn run_selftest() -> Vec<SelftestItem> {
    vec![
        item("two-loop recursions agree", recursions_agree),
        item(
            "materialized operator matches the dense formula",
            materialization_matches_dense_formula,
        ),
        item("zero-memory run reproduces adam", zero_memory_is_adam),
        item("communication ledger matches the closed form", ledger_matches_closed_form),
        item("sampling variance bound holds exhaustively", variance_bound_holds),
        item(
            "reference solver matches the normal equations",
            reference_matches_normal_equations,
        ),
    ]
}
