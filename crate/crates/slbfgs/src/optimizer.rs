//! The outer stochastic quasi-Newton loop, baseline optimizers, and
//! learning-rate schedules.
//!
//! One step of the quasi-Newton variants: sample a batch, take the batch
//! gradient, update the first/second-moment estimates, run the vector-free
//! recursion on the momentum gradient with the second-moment diagonal as
//! `H0`, move, then form the curvature pair `(s, y)` — `y` from an exact
//! Hessian product, a Gauss-Newton product, or a raw gradient difference,
//! depending on the variant — and offer it to the cautious memory. All
//! variants, baselines included, consume the same seeded batch stream, so
//! equal-seed runs are comparable draw for draw.

use ndarray::Array1;

use crate::curvature::{LbfgsMemory, DEFAULT_EPSILON};
use crate::distributed::{
    distributed_recursion_round, shard_batch, sharded_ggn_vec, sharded_gradient, CommLedger,
    PairPlacement,
};
use crate::error::{Error, Result};
use crate::precond::{
    h0_apply, scale_from_v_hat, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, H0_STABILIZER,
};
use crate::problems::{BatchSpec, BatchStream, Dataset, ProblemOracle};
use crate::two_loop::{vector_free_two_loop, InitialScale};

/// Armijo sufficient-decrease constant of the classical baseline's
/// backtracking line search.
pub const ARMIJO_C: f64 = 1e-4;

/// Hard cap on backtracking halvings per line search.
const MAX_BACKTRACKS: usize = 50;

/// Divergence guard: abort once the full loss exceeds this multiple of the
/// initial loss.
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Curvature from exact batch-Hessian products.
    LbfgsH,
    /// Curvature from Gauss-Newton/Fisher products.
    LbfgsF,
    /// Curvature from differences of consecutive batch gradients (the
    /// deliberately noise-exposed baseline).
    LbfgsS,
    /// Deterministic full-gradient method with backtracking line search.
    LbfgsClassic,
    /// Momentum SGD.
    Sgd,
    Adam,
    Adagrad,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LbfgsH => "lbfgs-h",
            Variant::LbfgsF => "lbfgs-f",
            Variant::LbfgsS => "lbfgs-s",
            Variant::LbfgsClassic => "lbfgs-classic",
            Variant::Sgd => "sgd",
            Variant::Adam => "adam",
            Variant::Adagrad => "adagrad",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "lbfgs-h" => Ok(Variant::LbfgsH),
            "lbfgs-f" => Ok(Variant::LbfgsF),
            "lbfgs-s" => Ok(Variant::LbfgsS),
            "lbfgs-classic" => Ok(Variant::LbfgsClassic),
            "sgd" => Ok(Variant::Sgd),
            "adam" => Ok(Variant::Adam),
            "adagrad" => Ok(Variant::Adagrad),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer variant {other:?} (expected lbfgs-h, lbfgs-f, lbfgs-s, \
                 lbfgs-classic, sgd, adam, or adagrad)"
            ))),
        }
    }

    /// Variants that maintain a curvature-pair memory.
    pub fn uses_memory(self) -> bool {
        matches!(
            self,
            Variant::LbfgsH | Variant::LbfgsF | Variant::LbfgsS | Variant::LbfgsClassic
        )
    }
}

/// Step-size rule evaluated at the global step index `k` (0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `alpha / (k + offset)`.
    Decaying { alpha: f64, offset: f64 },
}

impl LrSchedule {
    pub fn at(&self, k: u64) -> f64 {
        match self {
            LrSchedule::Constant(alpha) => *alpha,
            LrSchedule::Decaying { alpha, offset } => alpha / (k as f64 + offset),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Constant(alpha) => *alpha > 0.0 && alpha.is_finite(),
            LrSchedule::Decaying { alpha, offset } => {
                *alpha > 0.0 && alpha.is_finite() && *offset > 0.0 && offset.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "learning-rate schedule parameters must be positive and finite, got {self:?}"
            )))
        }
    }
}

/// Initial scaling fed into the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precond {
    /// Second-moment diagonal `1/(sqrt(v_hat) + c)`, with the momentum
    /// gradient as the search gradient.
    #[default]
    Adam,
    /// `H0 = I` and the raw batch gradient.
    Identity,
}

/// Point where the curvature operator behind `y` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurvatureAt {
    /// At `w_k`, the point the batch gradient was taken at.
    #[default]
    StepStart,
    /// At `w_{k+1}`.
    StepEnd,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub variant: Variant,
    /// Curvature-pair capacity; 0 turns the quasi-Newton variants into the
    /// pure preconditioned method.
    pub memory: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    /// Cautious-acceptance threshold.
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Momentum factor of the SGD baseline.
    pub momentum: f64,
    pub curvature_at: CurvatureAt,
    pub precond: Precond,
    /// Simulated worker count; above 1 the gradient, the curvature product,
    /// and the recursion all run through the sharded paths.
    pub workers: usize,
    pub placement: PairPlacement,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Defaults: `m = 10`, `b = 64`, constant `alpha = 0.025`, cautious
    /// threshold and ADAM parameters at their standard values, one worker.
    pub fn new(variant: Variant) -> Self {
        OptimizerConfig {
            variant,
            memory: 10,
            batch: 64,
            schedule: LrSchedule::Constant(0.025),
            epsilon: DEFAULT_EPSILON,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            momentum: 0.9,
            curvature_at: CurvatureAt::StepStart,
            precond: Precond::Adam,
            workers: 1,
            placement: PairPlacement::RoundRobin,
            seed: 0,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        self.schedule.validate()?;
        // The classical variant always takes the full pass, so its batch
        // field is inert.
        if self.variant != Variant::LbfgsClassic && (self.batch == 0 || self.batch > n) {
            return Err(Error::InvalidConfig(format!(
                "batch size must be in 1..={n}, got {}",
                self.batch
            )));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cautious threshold must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("worker count must be positive".into()));
        }
        if self.workers > 1 {
            if self.variant != Variant::LbfgsF {
                return Err(Error::InvalidConfig(format!(
                    "distributed execution needs the Gauss-Newton variant; {} computes \
                     curvature that the sharded path does not provide",
                    self.variant.name()
                )));
            }
            if self.workers > self.batch {
                return Err(Error::InvalidConfig(format!(
                    "cannot spread a batch of {} over {} workers",
                    self.batch, self.workers
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch metrics; epoch 0 is the initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// `train_loss - f_star`, when a reference value is available.
    pub subopt: Option<f64>,
    /// Held-out error, when evaluation data is available.
    pub test_error: Option<f64>,
    /// Norm of the full gradient.
    pub grad_norm: f64,
    /// Cumulative cautious-test rejections.
    pub skips: u64,
    /// Cumulative communication scalars (0 for single-worker runs).
    pub comm_scalars: u64,
    /// Cumulative optimization-path oracle work, one unit per component
    /// function touched by a loss, gradient, or curvature evaluation.
    /// Per-epoch measurement passes are not counted.
    pub oracle_calls: u64,
}

#[derive(Debug, Clone)]
pub struct DivergenceInfo {
    /// Global step index at which the guard fired.
    pub step: u64,
    pub reason: String,
}

/// Metrics of one optimizer run. Rows hold only finite values; a run that
/// trips the divergence guard keeps the rows recorded so far and carries the
/// guard's verdict in `diverged`.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub variant: Variant,
    pub rows: Vec<EpochRow>,
    pub f_star: Option<f64>,
    pub ledger: CommLedger,
    pub diverged: Option<DivergenceInfo>,
}

impl RunRecord {
    /// Last recorded row (the initial point's row always exists).
    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("runs always record the initial row")
    }
}

/// Pair offered to the memory during a step.
#[derive(Debug, Clone, Copy)]
pub struct PairOutcome<'a> {
    pub s: &'a Array1<f64>,
    pub y: &'a Array1<f64>,
    pub accepted: bool,
}

/// Everything a step computed, lent to observers before the iterate moves.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<'a> {
    /// Global 0-based step index.
    pub k: u64,
    /// Step size actually applied (the line-search result for the classical
    /// variant).
    pub alpha: f64,
    pub w: &'a Array1<f64>,
    pub w_next: &'a Array1<f64>,
    pub batch: &'a BatchSpec,
    /// Raw (unconditioned) gradient of the step's batch.
    pub grad: &'a Array1<f64>,
    /// Gradient handed to the direction computation (momentum-averaged
    /// under the ADAM preconditioner).
    pub search_grad: &'a Array1<f64>,
    pub scale: &'a InitialScale,
    /// Direction `p` with `w_next = w + alpha * p` (baselines included).
    pub direction: &'a Array1<f64>,
    /// `None` when the step had no pair to offer (baselines; the
    /// gradient-difference variant's first step).
    pub pair: Option<PairOutcome<'a>>,
    /// Memory state after the push, for the variants that keep one.
    pub memory: Option<&'a LbfgsMemory>,
}

pub trait StepObserver {
    fn on_step(&mut self, info: &StepInfo<'_>);
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl StepObserver for NoopObserver {
    fn on_step(&mut self, _: &StepInfo<'_>) {}
}

/// Optional measurement context for a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunSettings<'a> {
    /// Reference minimum for the sub-optimality column.
    pub f_star: Option<f64>,
    /// Held-out data for the test-error column.
    pub test_data: Option<&'a Dataset>,
    /// Stop after any epoch whose full gradient norm falls to this value;
    /// used by reference solves that want a tolerance, not an epoch count.
    pub stop_grad_norm: Option<f64>,
}

/// Momentum-SGD update on the velocity buffer; returns the direction `p`
/// with `w_next = w + alpha * p`.
pub(crate) fn sgd_direction(u: &mut Array1<f64>, momentum: f64, g: &Array1<f64>) -> Array1<f64> {
    *u *= momentum;
    *u += g;
    u.mapv(|x| -x)
}

/// Accumulator update of the coordinate-wise adaptive baseline.
pub(crate) fn adagrad_direction(acc: &mut Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    ndarray::Zip::from(&mut *acc).and(g).for_each(|a, &gi| *a += gi * gi);
    ndarray::Zip::from(&*acc)
        .and(g)
        .map_collect(|&a, &gi| -((1.0 / (a.sqrt() + H0_STABILIZER)) * gi))
}

/// Run an optimizer for `epochs` passes, recording per-epoch metrics.
///
/// Steps per epoch: `ceil(n / b)` for the stochastic variants, 1 for the
/// full-gradient classical variant. Epoch 0 records the initial point.
pub fn run(oracle: &ProblemOracle, config: &OptimizerConfig, epochs: usize) -> Result<RunRecord> {
    run_observed(oracle, config, epochs, RunSettings::default(), &mut NoopObserver)
}

/// [`run`] with a measurement context and a per-step observer.
pub fn run_observed(
    oracle: &ProblemOracle,
    config: &OptimizerConfig,
    epochs: usize,
    settings: RunSettings<'_>,
    observer: &mut dyn StepObserver,
) -> Result<RunRecord> {
    let n = oracle.n_samples();
    let d = oracle.dim();
    config.validate(n)?;

    let mut w = oracle.initial_point(config.seed);
    let mut stream = BatchStream::new(config.seed, n);
    let mut memory = if config.variant.uses_memory() {
        Some(LbfgsMemory::new(config.memory, config.epsilon)?)
    } else {
        None
    };
    let mut adam = AdamState::new(d, config.beta1, config.beta2)?;
    let mut sgd_u = Array1::zeros(d);
    let mut adagrad_acc = Array1::zeros(d);
    let mut prev_grad: Option<Array1<f64>> = None;
    let mut skips = 0u64;
    let mut oracle_calls = 0u64;
    let mut ledger = CommLedger::default();
    let mut k = 0u64;

    let steps_per_epoch = if config.variant == Variant::LbfgsClassic {
        1
    } else {
        n.div_ceil(config.batch)
    };

    let mut record = RunRecord {
        variant: config.variant,
        rows: Vec::with_capacity(epochs + 1),
        f_star: settings.f_star,
        ledger,
        diverged: None,
    };

    let row0 = metrics_row(oracle, &w, 0, &settings, skips, &ledger, oracle_calls)?;
    let initial_loss = row0.train_loss;
    let epochs = if settings.stop_grad_norm.is_some_and(|tol| row0.grad_norm <= tol) {
        0
    } else {
        epochs
    };
    record.rows.push(row0);

    'epochs: for epoch in 1..=epochs {
        for _ in 0..steps_per_epoch {
            let outcome = step(
                oracle, config, &w, &mut stream, memory.as_mut(), &mut adam, &mut sgd_u,
                &mut adagrad_acc, &mut prev_grad, &mut ledger, &mut oracle_calls, k,
            )?;
            let StepOutcome {
                w_next,
                batch,
                alpha,
                grad,
                search_grad,
                scale,
                direction,
                pair,
            } = match outcome {
                Ok(o) => o,
                Err(reason) => {
                    record.diverged = Some(DivergenceInfo { step: k, reason });
                    break 'epochs;
                }
            };
            if let Some((_, _, accepted)) = &pair {
                if !accepted {
                    skips += 1;
                }
            }
            let pair_view = pair.as_ref().map(|(s, y, accepted)| PairOutcome {
                s,
                y,
                accepted: *accepted,
            });
            observer.on_step(&StepInfo {
                k,
                alpha,
                w: &w,
                w_next: &w_next,
                batch: &batch,
                grad: &grad,
                search_grad: &search_grad,
                scale: &scale,
                direction: &direction,
                pair: pair_view,
                memory: memory.as_ref(),
            });
            w = w_next;
            k += 1;
        }
        let row = metrics_row(oracle, &w, epoch, &settings, skips, &ledger, oracle_calls)?;
        if !row.train_loss.is_finite()
            || !row.grad_norm.is_finite()
            || row.train_loss > DIVERGENCE_FACTOR * initial_loss
        {
            record.diverged = Some(DivergenceInfo {
                step: k,
                reason: format!(
                    "full loss {} tripped the divergence guard ({}x initial {})",
                    row.train_loss, DIVERGENCE_FACTOR, initial_loss
                ),
            });
            break;
        }
        let done = settings
            .stop_grad_norm
            .is_some_and(|tol| row.grad_norm <= tol);
        record.rows.push(row);
        if done {
            break;
        }
    }

    record.ledger = ledger;
    Ok(record)
}

/// Everything one step produces. The pair triple is `(s, y, accepted)`.
struct StepOutcome {
    w_next: Array1<f64>,
    batch: BatchSpec,
    alpha: f64,
    grad: Array1<f64>,
    search_grad: Array1<f64>,
    scale: InitialScale,
    direction: Array1<f64>,
    pair: Option<(Array1<f64>, Array1<f64>, bool)>,
}

/// One optimizer step. The outer `Result` is a hard error (config/contract);
/// the inner one reports divergence by reason.
#[allow(clippy::too_many_arguments)]
fn step(
    oracle: &ProblemOracle,
    config: &OptimizerConfig,
    w: &Array1<f64>,
    stream: &mut BatchStream,
    memory: Option<&mut LbfgsMemory>,
    adam: &mut AdamState,
    sgd_u: &mut Array1<f64>,
    adagrad_acc: &mut Array1<f64>,
    prev_grad: &mut Option<Array1<f64>>,
    ledger: &mut CommLedger,
    oracle_calls: &mut u64,
    k: u64,
) -> Result<std::result::Result<StepOutcome, String>> {
    let n = oracle.n_samples();
    let alpha = config.schedule.at(k);

    if config.variant == Variant::LbfgsClassic {
        let memory = memory.expect("classical variant keeps a memory");
        let batch = BatchSpec::full(n);
        let g = oracle.batch_gradient(w, &batch)?;
        *oracle_calls += n as u64;
        // Newest-pair scaling (y's / y'y) I, the classical default.
        let scale = if memory.is_empty() {
            InitialScale::Identity
        } else {
            let newest = memory.pair(memory.len() - 1);
            InitialScale::uniform(newest.ys / newest.yy)?
        };
        let direction = vector_free_two_loop(memory, &g, &scale)?.direction;
        let f0 = oracle.batch_loss(w, &batch)?;
        *oracle_calls += n as u64;
        let slope = g.dot(&direction);
        let mut t = 1.0;
        for _ in 0..MAX_BACKTRACKS {
            let cand = w + &(&direction * t);
            let f1 = oracle.batch_loss(&cand, &batch)?;
            *oracle_calls += n as u64;
            if f1 <= f0 + ARMIJO_C * t * slope {
                break;
            }
            t *= 0.5;
        }
        let w_next = w + &(&direction * t);
        if !w_next.iter().all(|x| x.is_finite()) {
            return Ok(Err("non-finite iterate after line search".into()));
        }
        let s = &w_next - w;
        let y = oracle.batch_gradient(&w_next, &batch)? - &g;
        *oracle_calls += n as u64;
        let accepted = memory.push_pair(s.clone(), y.clone())?;
        return Ok(Ok(StepOutcome {
            w_next,
            batch,
            alpha: t,
            search_grad: g.clone(),
            grad: g,
            scale,
            direction,
            pair: Some((s, y, accepted)),
        }));
    }

    let batch = stream.next_batch(config.batch)?;
    let sharded = if config.workers > 1 {
        Some(shard_batch(&batch, config.workers)?)
    } else {
        None
    };

    let g = match &sharded {
        Some(sh) => sharded_gradient(oracle, w, sh, ledger)?,
        None => oracle.batch_gradient(w, &batch)?,
    };
    *oracle_calls += batch.len() as u64;
    if !g.iter().all(|x| x.is_finite()) {
        return Ok(Err("non-finite batch gradient".into()));
    }

    match config.variant {
        Variant::Sgd | Variant::Adam | Variant::Adagrad => {
            let (direction, scale) = match config.variant {
                Variant::Sgd => (
                    sgd_direction(sgd_u, config.momentum, &g),
                    InitialScale::Identity,
                ),
                Variant::Adam => {
                    let (m_hat, v_hat) = adam.update(&g)?;
                    (-h0_apply(&v_hat, &m_hat)?, scale_from_v_hat(&v_hat)?)
                }
                Variant::Adagrad => (adagrad_direction(adagrad_acc, &g), InitialScale::Identity),
                _ => unreachable!(),
            };
            let w_next = w + &(&direction * alpha);
            if !w_next.iter().all(|x| x.is_finite()) {
                return Ok(Err("non-finite iterate".into()));
            }
            Ok(Ok(StepOutcome {
                w_next,
                batch,
                alpha,
                search_grad: g.clone(),
                grad: g,
                scale,
                direction,
                pair: None,
            }))
        }
        Variant::LbfgsH | Variant::LbfgsF | Variant::LbfgsS => {
            let memory = memory.expect("quasi-Newton variants keep a memory");
            let (search_grad, scale) = match config.precond {
                Precond::Adam => {
                    let (m_hat, v_hat) = adam.update(&g)?;
                    (m_hat, scale_from_v_hat(&v_hat)?)
                }
                Precond::Identity => (g.clone(), InitialScale::Identity),
            };
            let direction = match &sharded {
                Some(_) => distributed_recursion_round(
                    memory,
                    &search_grad,
                    &scale,
                    config.workers,
                    config.placement,
                    ledger,
                )?
                .direction,
                None => vector_free_two_loop(memory, &search_grad, &scale)?.direction,
            };
            let w_next = w + &(&direction * alpha);
            if !w_next.iter().all(|x| x.is_finite()) {
                return Ok(Err("non-finite iterate".into()));
            }
            let s = &w_next - w;
            let w_curv = match config.curvature_at {
                CurvatureAt::StepStart => w,
                CurvatureAt::StepEnd => &w_next,
            };
            let y = match config.variant {
                Variant::LbfgsH => {
                    let y = oracle.hessian_vec(w_curv, &batch, &s)?;
                    *oracle_calls += batch.len() as u64;
                    Some(y)
                }
                Variant::LbfgsF => {
                    let y = match &sharded {
                        Some(sh) => sharded_ggn_vec(oracle, w_curv, &s, sh, ledger)?,
                        None => oracle.ggn_vec(w_curv, &batch, &s)?,
                    };
                    *oracle_calls += batch.len() as u64;
                    Some(y)
                }
                Variant::LbfgsS => {
                    // Difference of the raw gradients of this step and the
                    // previous one; no pair exists on the first step.
                    prev_grad.take().map(|prev| &g - &prev)
                }
                _ => unreachable!(),
            };
            if config.variant == Variant::LbfgsS {
                *prev_grad = Some(g.clone());
            }
            let pair = match y {
                Some(y) => {
                    let accepted = memory.push_pair(s.clone(), y.clone())?;
                    Some((s, y, accepted))
                }
                None => None,
            };
            Ok(Ok(StepOutcome {
                w_next,
                batch,
                alpha,
                grad: g,
                search_grad,
                scale,
                direction,
                pair,
            }))
        }
        Variant::LbfgsClassic => unreachable!("handled above"),
    }
}

fn metrics_row(
    oracle: &ProblemOracle,
    w: &Array1<f64>,
    epoch: usize,
    settings: &RunSettings<'_>,
    skips: u64,
    ledger: &CommLedger,
    oracle_calls: u64,
) -> Result<EpochRow> {
    let train_loss = oracle.full_loss(w)?;
    let full_grad = oracle.full_gradient(w)?;
    let test_error = match settings.test_data {
        Some(data) => Some(oracle.eval_error(w, data)?),
        None => None,
    };
    Ok(EpochRow {
        epoch,
        train_loss,
        subopt: settings.f_star.map(|fs| train_loss - fs),
        test_error,
        grad_norm: full_grad.dot(&full_grad).sqrt(),
        skips,
        comm_scalars: ledger.total_scalars(),
        oracle_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{synth_dataset, Dataset, LeastSquaresProblem, LogisticProblem, SynthKind};
    use ndarray::array;

    fn logistic_oracle(n: usize, d: usize, seed: u64) -> ProblemOracle {
        let synth = synth_dataset(SynthKind::Logistic, n, d, seed, 0.3).unwrap();
        ProblemOracle::Logistic(LogisticProblem::new(synth.dataset, 1e-3).unwrap())
    }

    /// `F(w) = (w1 - 1)^2 + (w2 - 1)^2` as a least-squares instance
    /// (Hessian `2 I`, minimum away from the zero start).
    fn quadratic_oracle() -> ProblemOracle {
        let data = Dataset::new(
            vec![vec![(0, 2.0)], vec![(1, 2.0)]],
            vec![2.0, 2.0],
            2,
        )
        .unwrap();
        ProblemOracle::LeastSquares(LeastSquaresProblem::new(data, 0.0).unwrap())
    }

    struct Trace {
        iterates: Vec<Array1<f64>>,
        pair_outcomes: Vec<Option<bool>>,
        descent_dots: Vec<f64>,
    }

    impl Trace {
        fn new() -> Self {
            Trace {
                iterates: Vec::new(),
                pair_outcomes: Vec::new(),
                descent_dots: Vec::new(),
            }
        }
    }

    impl StepObserver for Trace {
        fn on_step(&mut self, info: &StepInfo<'_>) {
            self.iterates.push(info.w_next.clone());
            self.pair_outcomes.push(info.pair.map(|p| p.accepted));
            self.descent_dots.push(info.search_grad.dot(info.direction));
        }
    }

    #[test]
    fn schedules_evaluate_to_the_stated_values() {
        assert_eq!(LrSchedule::Constant(0.1).at(0), 0.1);
        assert_eq!(LrSchedule::Constant(0.1).at(999), 0.1);
        let dec = LrSchedule::Decaying {
            alpha: 1.0,
            offset: 4.0,
        };
        assert_eq!(dec.at(0), 0.25);
        for k in 0..30u64 {
            let product = dec.at(k) * (k as f64 + 4.0);
            assert!((product - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges_in_two_steps_with_exact_curvature() {
        let oracle = quadratic_oracle();
        let mut config = OptimizerConfig::new(Variant::LbfgsH);
        config.batch = 2;
        config.memory = 1;
        config.schedule = LrSchedule::Constant(1.0);
        config.precond = Precond::Identity;
        let record = run(&oracle, &config, 3).unwrap();
        assert!(record.diverged.is_none());
        // gradient 2w, Hessian 2I: step 1 scales by (1 - 2), step 2 is exact
        let last = record.final_row();
        assert!(last.grad_norm <= 1e-12, "grad norm {}", last.grad_norm);
        assert!(record.rows[2].grad_norm <= 1e-12);
    }

    #[test]
    fn equal_seeds_reproduce_the_record() {
        let oracle = logistic_oracle(60, 5, 1);
        let mut config = OptimizerConfig::new(Variant::LbfgsH);
        config.batch = 16;
        config.seed = 7;
        let a = run(&oracle, &config, 3).unwrap();
        let b = run(&oracle, &config, 3).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn zero_epochs_records_only_the_initial_point() {
        let oracle = logistic_oracle(20, 4, 2);
        let mut config = OptimizerConfig::new(Variant::Adam);
        config.batch = 5;
        let record = run(&oracle, &config, 0).unwrap();
        assert_eq!(record.rows.len(), 1);
        assert_eq!(record.rows[0].epoch, 0);
        assert!((record.rows[0].train_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adam_baseline_is_the_zero_memory_quasi_newton_method() {
        let oracle = logistic_oracle(50, 6, 3);
        let mut base_cfg = OptimizerConfig::new(Variant::Adam);
        base_cfg.batch = 8;
        base_cfg.seed = 11;
        let mut zero_cfg = OptimizerConfig::new(Variant::LbfgsH);
        zero_cfg.batch = 8;
        zero_cfg.seed = 11;
        zero_cfg.memory = 0;
        let mut base_trace = Trace::new();
        let mut zero_trace = Trace::new();
        run_observed(&oracle, &base_cfg, 4, RunSettings::default(), &mut base_trace).unwrap();
        run_observed(&oracle, &zero_cfg, 4, RunSettings::default(), &mut zero_trace).unwrap();
        assert_eq!(base_trace.iterates.len(), zero_trace.iterates.len());
        for (a, b) in base_trace.iterates.iter().zip(&zero_trace.iterates) {
            assert_eq!(a, b, "trajectories must coincide exactly");
        }
    }

    #[test]
    fn exact_and_gauss_newton_curvature_coincide_on_a_linear_model() {
        let oracle = logistic_oracle(80, 6, 5);
        let mut h_cfg = OptimizerConfig::new(Variant::LbfgsH);
        h_cfg.batch = 16;
        h_cfg.seed = 3;
        let mut f_cfg = h_cfg.clone();
        f_cfg.variant = Variant::LbfgsF;
        let mut h_trace = Trace::new();
        let mut f_trace = Trace::new();
        run_observed(&oracle, &h_cfg, 10, RunSettings::default(), &mut h_trace).unwrap();
        run_observed(&oracle, &f_cfg, 10, RunSettings::default(), &mut f_trace).unwrap();
        for (a, b) in h_trace.iterates.iter().zip(&f_trace.iterates) {
            let err = crate::linalg::rel_err_vec(&a.view(), &b.view());
            assert!(err <= 1e-10, "iterates drifted apart: {err}");
        }
    }

    #[test]
    fn search_directions_are_descent_directions() {
        let oracle = logistic_oracle(60, 8, 9);
        let mut config = OptimizerConfig::new(Variant::LbfgsH);
        config.batch = 10;
        let mut trace = Trace::new();
        run_observed(&oracle, &config, 5, RunSettings::default(), &mut trace).unwrap();
        assert!(!trace.descent_dots.is_empty());
        for (k, dot) in trace.descent_dots.iter().enumerate() {
            assert!(*dot < 0.0, "step {k}: search_grad . direction = {dot}");
        }
    }

    #[test]
    fn gradient_difference_variant_skips_the_first_pair() {
        let oracle = logistic_oracle(30, 4, 13);
        let mut config = OptimizerConfig::new(Variant::LbfgsS);
        config.batch = 30;
        let mut trace = Trace::new();
        run_observed(&oracle, &config, 2, RunSettings::default(), &mut trace).unwrap();
        assert_eq!(trace.pair_outcomes[0], None, "no previous gradient yet");
        assert!(trace.pair_outcomes[1].is_some());
    }

    #[test]
    fn sgd_without_momentum_descends_on_the_quadratic() {
        let oracle = quadratic_oracle();
        let mut config = OptimizerConfig::new(Variant::Sgd);
        config.batch = 2;
        config.momentum = 0.0;
        config.schedule = LrSchedule::Constant(0.4); // < 2 / Lambda = 1
        let record = run(&oracle, &config, 20).unwrap();
        for pair in record.rows.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-15,
                "loss rose between epochs {} and {}",
                pair[0].epoch,
                pair[1].epoch
            );
        }
    }

    #[test]
    fn adagrad_steps_shrink_like_the_inverse_square_root() {
        let mut acc = Array1::zeros(2);
        let g = array![3.0, -0.5];
        let mut magnitudes = Vec::new();
        for _ in 0..200 {
            let dir = adagrad_direction(&mut acc, &g);
            magnitudes.push(dir.dot(&dir).sqrt());
        }
        for (i, mag) in magnitudes.iter().enumerate() {
            let k = (i + 1) as f64;
            let expected = (2.0f64).sqrt() / k.sqrt();
            assert!(
                (mag - expected).abs() < 1e-6 * expected,
                "step {i}: {mag} vs {expected}"
            );
        }
    }

    #[test]
    fn classical_line_search_decreases_the_loss_every_step() {
        let oracle = logistic_oracle(50, 5, 17);
        let mut config = OptimizerConfig::new(Variant::LbfgsClassic);
        config.memory = 5;
        let record = run(&oracle, &config, 25).unwrap();
        assert!(record.diverged.is_none());
        for pair in record.rows.windows(2) {
            assert!(pair[1].train_loss <= pair[0].train_loss);
        }
        assert!(
            record.final_row().grad_norm < 1e-6,
            "full-gradient method stalled at {}",
            record.final_row().grad_norm
        );
    }

    #[test]
    fn divergence_guard_preserves_the_partial_record() {
        let oracle = quadratic_oracle();
        let mut config = OptimizerConfig::new(Variant::Sgd);
        config.batch = 2;
        config.schedule = LrSchedule::Constant(50.0); // far above 2 / Lambda
        let record = run(&oracle, &config, 10).unwrap();
        let failure = record.diverged.as_ref().expect("guard must fire");
        assert!(failure.reason.contains("divergence") || failure.reason.contains("non-finite"));
        assert!(record.rows.len() < 11);
        for row in &record.rows {
            assert!(row.train_loss.is_finite());
        }
    }

    #[test]
    fn config_validation_rejects_inconsistent_setups() {
        let oracle = logistic_oracle(20, 3, 23);
        let mut config = OptimizerConfig::new(Variant::LbfgsH);
        config.batch = 0;
        assert!(run(&oracle, &config, 1).is_err());
        config.batch = 21;
        assert!(run(&oracle, &config, 1).is_err());
        config.batch = 10;
        config.momentum = 1.0;
        assert!(run(&oracle, &config, 1).is_err());
        config.momentum = 0.9;
        config.workers = 2; // sharded execution needs the Gauss-Newton variant
        assert!(run(&oracle, &config, 1).is_err());
        let mut config = OptimizerConfig::new(Variant::LbfgsF);
        config.batch = 4;
        config.workers = 8;
        assert!(run(&oracle, &config, 1).is_err());
    }

    #[test]
    fn sharded_execution_matches_single_worker_and_fills_the_ledger() {
        let oracle = logistic_oracle(60, 5, 29);
        let mut config = OptimizerConfig::new(Variant::LbfgsF);
        config.batch = 12;
        config.memory = 3;
        config.seed = 5;
        let solo = run(&oracle, &config, 3).unwrap();
        config.workers = 4;
        let sharded = run(&oracle, &config, 3).unwrap();
        assert_eq!(solo.final_row().comm_scalars, 0);
        assert!(sharded.final_row().comm_scalars > 0);
        for (a, b) in solo.rows.iter().zip(&sharded.rows) {
            assert!(
                (a.train_loss - b.train_loss).abs() <= 1e-10 * a.train_loss.abs().max(1.0),
                "epoch {}: {} vs {}",
                a.epoch,
                a.train_loss,
                b.train_loss
            );
        }
    }

    #[test]
    fn oracle_call_count_tracks_the_optimization_path_only() {
        let oracle = logistic_oracle(30, 4, 31);
        let mut config = OptimizerConfig::new(Variant::LbfgsH);
        config.batch = 10;
        let record = run(&oracle, &config, 2).unwrap();
        // 3 steps per epoch, gradient + curvature product per step
        assert_eq!(record.rows[0].oracle_calls, 0);
        assert_eq!(record.rows[1].oracle_calls, 3 * 10 * 2);
        assert_eq!(record.rows[2].oracle_calls, 6 * 10 * 2);
    }
}
