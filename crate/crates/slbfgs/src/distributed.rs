//! Logical data-parallel execution with an exact communication ledger.
//!
//! Workers are deterministic sequential tasks, not processes: each owns a
//! contiguous shard of the batch, computes its weighted contribution, and a
//! fixed-order binary tree folds the partials. The ledger prices a broadcast
//! at its payload once and a reduction at its payload once per tree round,
//! so every phase total is a closed-form function of `(d, tau, m)`:
//! gradient `d + d L`, curvature `2d + d L` (the folded product goes back
//! out to the workers), recursion `m(m+1) + m` reduced scalars plus the
//! `d`-scalar broadcast of `r0`, with `L = ceil(log2 tau)`.

use ndarray::{Array1, Array2};

use crate::curvature::LbfgsMemory;
use crate::error::{Error, Result};
use crate::problems::{BatchSpec, ProblemOracle};
use crate::two_loop::{vf_first_loop, vf_second_loop, DirectionResult, InitialScale};

/// `ceil(log2 tau)`: tree-reduction rounds over `tau` workers.
pub fn reduce_rounds_for(workers: usize) -> u64 {
    if workers <= 1 {
        0
    } else {
        ((workers - 1).ilog2() + 1) as u64
    }
}

/// A batch split into per-worker index sets.
#[derive(Debug, Clone)]
pub struct ShardedBatch {
    shards: Vec<BatchSpec>,
    total: usize,
}

impl ShardedBatch {
    pub fn shards(&self) -> &[BatchSpec] {
        &self.shards
    }

    pub fn workers(&self) -> usize {
        self.shards.len()
    }

    /// Size of the underlying batch.
    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Bypasses the contiguity convention; for reordering experiments only.
    #[doc(hidden)]
    pub fn from_shards_unchecked(shards: Vec<BatchSpec>) -> Self {
        let total = shards.iter().map(BatchSpec::len).sum();
        ShardedBatch { shards, total }
    }
}

/// Split a batch into `workers` contiguous near-equal shards, remainder
/// spread over the leading shards (`|S|=7, tau=3 -> [3,2,2]`).
pub fn shard_batch(batch: &BatchSpec, workers: usize) -> Result<ShardedBatch> {
    if workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    if workers > batch.len() {
        return Err(Error::NotEnough {
            requested: workers,
            available: batch.len(),
        });
    }
    let base = batch.len() / workers;
    let rem = batch.len() % workers;
    let mut shards = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..workers {
        let size = base + usize::from(i < rem);
        let chunk = batch.indices()[start..start + size].to_vec();
        shards.push(BatchSpec::from_indices(chunk)?);
        start += size;
    }
    Ok(ShardedBatch {
        shards,
        total: batch.len(),
    })
}

/// Scalar traffic of one communication phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseCounters {
    /// Scalars pushed server -> workers.
    pub broadcast_scalars: u64,
    /// Scalars priced on the reduction path (payload x tree rounds for
    /// vector folds, one per scalar for direct sends).
    pub reduced_scalars: u64,
    /// Reduction events' tree rounds.
    pub reduce_rounds: u64,
}

impl PhaseCounters {
    pub fn total_scalars(&self) -> u64 {
        self.broadcast_scalars + self.reduced_scalars
    }
}

/// Per-phase communication totals of a run or a single step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    /// Batch-gradient assembly.
    pub gradient: PhaseCounters,
    /// Curvature product for `y_k`.
    pub curvature: PhaseCounters,
    /// Vector-free recursion round.
    pub recursion: PhaseCounters,
}

impl CommLedger {
    pub fn total_scalars(&self) -> u64 {
        self.gradient.total_scalars()
            + self.curvature.total_scalars()
            + self.recursion.total_scalars()
    }
}

/// Closed-form per-phase scalar totals for one optimizer step at effective
/// memory `m`; the ledger of a real step must match these exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerExpectation {
    pub gradient: u64,
    pub curvature: u64,
    pub recursion: u64,
}

impl LedgerExpectation {
    pub fn total(&self) -> u64 {
        self.gradient + self.curvature + self.recursion
    }
}

pub fn expected_step_scalars(d: usize, workers: usize, m: usize) -> LedgerExpectation {
    let l = reduce_rounds_for(workers);
    let d = d as u64;
    let m = m as u64;
    LedgerExpectation {
        gradient: d + d * l,
        curvature: 2 * d + d * l,
        recursion: m * (m + 1) + m + d,
    }
}

/// Budget constant of the step-total bound
/// `total <= BUDGET_CONSTANT * (d * ceil(log2 tau) + m^2)`.
pub const BUDGET_CONSTANT: u64 = 8;

/// Check one step's scalar total against the budget. Meaningful for
/// `tau >= 2`: a single worker has a degenerate tree (`L = 0`), no real
/// communication, and the local passes the simulator still prices would be
/// compared against an empty budget.
pub fn within_budget(total: u64, d: usize, workers: usize, m: usize) -> bool {
    total <= BUDGET_CONSTANT * (d as u64 * reduce_rounds_for(workers) + (m as u64).pow(2))
}

/// Fixed-order binary-tree fold: stride-1 neighbor sums, then stride 2, ...
/// The order is a property of the tree, not of worker completion, which is
/// what keeps repeated runs bit-identical.
fn tree_reduce(mut parts: Vec<Array1<f64>>) -> (Array1<f64>, u64) {
    let n = parts.len();
    let mut rounds = 0u64;
    let mut gap = 1usize;
    while gap < n {
        let mut i = 0;
        while i + gap < n {
            let (head, tail) = parts.split_at_mut(i + gap);
            head[i] += &tail[0];
            i += 2 * gap;
        }
        gap *= 2;
        rounds += 1;
    }
    (parts.swap_remove(0), rounds)
}

/// Batch gradient assembled worker-side: each shard contributes
/// `(|shard| / |S|) * gradient(w, shard)`, folded by the tree.
pub fn sharded_gradient(
    oracle: &ProblemOracle,
    w: &Array1<f64>,
    sharded: &ShardedBatch,
    ledger: &mut CommLedger,
) -> Result<Array1<f64>> {
    let total = sharded.total_len() as f64;
    let mut parts = Vec::with_capacity(sharded.workers());
    for shard in sharded.shards() {
        let weight = shard.len() as f64 / total;
        parts.push(oracle.batch_gradient(w, shard)? * weight);
    }
    let (sum, rounds) = tree_reduce(parts);
    let d = w.len() as u64;
    ledger.gradient.broadcast_scalars += d;
    ledger.gradient.reduced_scalars += d * rounds;
    ledger.gradient.reduce_rounds += rounds;
    Ok(sum)
}

/// Sharded Gauss-Newton product: weighted per-shard `ggn_vec` folded by the
/// tree, then the result re-broadcast so workers can store the pair locally.
/// Requires a diagonal loss Hessian — that is what makes the per-shard
/// products independent in the curvature form the workers evaluate.
pub fn sharded_ggn_vec(
    oracle: &ProblemOracle,
    w: &Array1<f64>,
    v: &Array1<f64>,
    sharded: &ShardedBatch,
    ledger: &mut CommLedger,
) -> Result<Array1<f64>> {
    if !oracle.has_diagonal_loss_hessian() {
        return Err(Error::UnsupportedLoss(format!(
            "sharded curvature products need a diagonal loss Hessian; \
             {} is configured with a coupled one",
            oracle.kind_name()
        )));
    }
    let total = sharded.total_len() as f64;
    let mut parts = Vec::with_capacity(sharded.workers());
    for shard in sharded.shards() {
        let weight = shard.len() as f64 / total;
        parts.push(oracle.ggn_vec(w, shard, v)? * weight);
    }
    let (sum, rounds) = tree_reduce(parts);
    let d = v.len() as u64;
    ledger.curvature.broadcast_scalars += 2 * d;
    ledger.curvature.reduced_scalars += d * rounds;
    ledger.curvature.reduce_rounds += rounds;
    Ok(sum)
}

/// Where the Gram-matrix dot products run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PairPlacement {
    /// Product `t` runs on worker `t % tau`; feasible for any worker count.
    #[default]
    RoundRobin,
    /// Every product gets its own worker; needs `tau >= m(m+1)`.
    PerDotProduct,
}

/// One vector-free recursion round over the worker pool.
///
/// Workers evaluate the Gram products they own and send one scalar each;
/// the server runs both coefficient loops, assembles `q`, applies `h0`, and
/// broadcasts `r0`; workers answer with the `m` products `y_j' r0`. The
/// arithmetic mirrors [`crate::two_loop::vector_free_two_loop`] operation
/// for operation, so the returned direction is identical, and the two
/// placements differ only in ownership (and feasibility), never in values.
pub fn distributed_recursion_round(
    memory: &LbfgsMemory,
    g: &Array1<f64>,
    h0: &InitialScale,
    workers: usize,
    placement: PairPlacement,
    ledger: &mut CommLedger,
) -> Result<DirectionResult> {
    if workers == 0 {
        return Err(Error::InvalidConfig("worker count must be positive".into()));
    }
    let m = memory.len();
    if placement == PairPlacement::PerDotProduct && workers < m * (m + 1) {
        return Err(Error::InvalidConfig(format!(
            "per-dot-product placement needs at least m(m+1) = {} workers, got {workers}",
            m * (m + 1)
        )));
    }
    if let Some(dim) = memory.dim() {
        if g.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: g.len(),
            });
        }
    }
    let d = g.len();

    // Gram entries, filled in worker order. Task t covers entry
    // (p, q) = (t / m, t % m); rows p < m are y_p' s_q, row m is g' s_q.
    // The writes are disjoint, so the fill order cannot change the matrix.
    let tasks = m * (m + 1);
    let mut entries = Array2::zeros((m + 1, m));
    for worker in 0..workers {
        let mut task = worker;
        while task < tasks {
            let (p, q) = (task / m, task % m);
            let vec_p = if p < m { &memory.pair(p).y } else { g };
            entries[[p, q]] = vec_p.dot(&memory.pair(q).s);
            task += match placement {
                PairPlacement::RoundRobin => workers,
                PairPlacement::PerDotProduct => tasks + 1,
            };
        }
    }
    ledger.recursion.reduced_scalars += tasks as u64;

    // Server-side coefficient loops.
    let mut deltas = vec![0.0; 2 * m + 2];
    deltas[0] = 1.0;
    deltas[2 * m + 1] = -1.0;
    let alphas = if m > 0 {
        vf_first_loop(&entries, &mut deltas)?
    } else {
        Vec::new()
    };

    let mut q = Array1::zeros(d);
    for i in 0..m {
        q.scaled_add(deltas[m + 1 + i], &memory.pair(i).y);
    }
    q.scaled_add(deltas[2 * m + 1], g);
    let r0 = h0.apply(&q)?;
    ledger.recursion.broadcast_scalars += d as u64;

    let y_dots: Vec<f64> = (0..m).map(|j| memory.pair(j).y.dot(&r0)).collect();
    ledger.recursion.reduced_scalars += m as u64;
    if m > 0 {
        // two scalar collections: the Gram entries and the y' r0 products
        ledger.recursion.reduce_rounds += 2;
    }

    if m > 0 {
        vf_second_loop(&entries, &y_dots, &alphas, &mut deltas)?;
    }

    let mut direction = &r0 * deltas[0];
    for i in 0..m {
        direction.scaled_add(deltas[1 + i], &memory.pair(i).s);
    }

    Ok(DirectionResult {
        direction,
        deltas,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::DEFAULT_EPSILON;
    use crate::problems::{
        sample_batch, synth_dataset, GgnForm, LeastSquaresProblem, LogisticProblem, MlpProblem,
        SynthKind,
    };
    use crate::two_loop::vector_free_two_loop;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn logistic_oracle(n: usize, d: usize, seed: u64) -> ProblemOracle {
        let synth = synth_dataset(SynthKind::Logistic, n, d, seed, 0.3).unwrap();
        ProblemOracle::Logistic(LogisticProblem::new(synth.dataset, 1e-3).unwrap())
    }

    fn random_vec(rng: &mut ChaCha20Rng, d: usize) -> Array1<f64> {
        Array1::from_iter((0..d).map(|_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn shards_are_contiguous_remainder_first() {
        let batch = BatchSpec::full(7);
        let sharded = shard_batch(&batch, 3).unwrap();
        let sizes: Vec<usize> = sharded.shards().iter().map(BatchSpec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        let batch = BatchSpec::full(6);
        let sizes: Vec<usize> = shard_batch(&batch, 3)
            .unwrap()
            .shards()
            .iter()
            .map(BatchSpec::len)
            .collect();
        assert_eq!(sizes, vec![2, 2, 2]);
    }

    #[test]
    fn shards_partition_the_batch() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let batch = sample_batch(40, 17, &mut rng).unwrap();
        for workers in [1, 2, 5, 17] {
            let sharded = shard_batch(&batch, workers).unwrap();
            let rebuilt: Vec<usize> = sharded
                .shards()
                .iter()
                .flat_map(|s| s.indices().iter().copied())
                .collect();
            assert_eq!(rebuilt, batch.indices(), "workers = {workers}");
        }
    }

    #[test]
    fn more_workers_than_samples_is_an_error() {
        let batch = BatchSpec::full(3);
        assert!(matches!(
            shard_batch(&batch, 4),
            Err(Error::NotEnough { .. })
        ));
        assert!(shard_batch(&batch, 0).is_err());
    }

    #[test]
    fn tree_rounds_match_the_ceiling_log() {
        for n in 1usize..=9 {
            let parts = vec![array![1.0]; n];
            let (sum, rounds) = tree_reduce(parts);
            assert_eq!(sum[0], n as f64);
            assert_eq!(rounds, reduce_rounds_for(n), "n = {n}");
        }
    }

    #[test]
    fn sharded_gradient_matches_monolithic() {
        let oracle = logistic_oracle(30, 6, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let w = random_vec(&mut rng, 6);
        let batch = sample_batch(30, 23, &mut rng).unwrap();
        let reference = oracle.batch_gradient(&w, &batch).unwrap();
        for workers in [1usize, 2, 4, 8] {
            let sharded = shard_batch(&batch, workers).unwrap();
            let mut ledger = CommLedger::default();
            let got = sharded_gradient(&oracle, &w, &sharded, &mut ledger).unwrap();
            let err = crate::linalg::rel_err_vec(&got.view(), &reference.view());
            assert!(err <= 1e-14, "workers {workers}: {err}");
            let l = reduce_rounds_for(workers);
            assert_eq!(ledger.gradient.broadcast_scalars, 6);
            assert_eq!(ledger.gradient.reduced_scalars, 6 * l);
            assert_eq!(ledger.gradient.reduce_rounds, l);
        }
    }

    #[test]
    fn sharded_ggn_matches_monolithic_least_squares() {
        let synth = synth_dataset(SynthKind::LeastSquares, 24, 5, 3, 0.7).unwrap();
        let oracle =
            ProblemOracle::LeastSquares(LeastSquaresProblem::new(synth.dataset, 0.05).unwrap());
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let w = random_vec(&mut rng, 5);
        let v = random_vec(&mut rng, 5);
        let batch = BatchSpec::full(24);
        let reference = oracle.ggn_vec(&w, &batch, &v).unwrap();
        let sharded = shard_batch(&batch, 4).unwrap();
        let mut ledger = CommLedger::default();
        let got = sharded_ggn_vec(&oracle, &w, &v, &sharded, &mut ledger).unwrap();
        let err = crate::linalg::rel_err_vec(&got.view(), &reference.view());
        assert!(err <= 1e-12, "relative error {err}");
        assert_eq!(ledger.curvature.broadcast_scalars, 10);
        assert_eq!(ledger.curvature.reduced_scalars, 5 * 2);
    }

    #[test]
    fn shard_order_only_moves_the_result_within_tolerance() {
        let oracle = logistic_oracle(40, 8, 19);
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let w = random_vec(&mut rng, 8);
        let v = random_vec(&mut rng, 8);
        let batch = BatchSpec::full(40);
        let sharded = shard_batch(&batch, 5).unwrap();
        let mut reversed = sharded.shards().to_vec();
        reversed.reverse();
        let reversed = ShardedBatch::from_shards_unchecked(reversed);
        let mut ledger = CommLedger::default();
        let a = sharded_ggn_vec(&oracle, &w, &v, &sharded, &mut ledger).unwrap();
        let b = sharded_ggn_vec(&oracle, &w, &v, &reversed, &mut ledger).unwrap();
        let err = crate::linalg::rel_err_vec(&a.view(), &b.view());
        assert!(err <= 1e-10, "permuted shard order drifted: {err}");
    }

    #[test]
    fn coupled_loss_curvature_is_rejected() {
        let synth = synth_dataset(SynthKind::CrossEntropy { classes: 3 }, 12, 4, 5, 0.1).unwrap();
        let softmax = ProblemOracle::CrossEntropyMlp(
            MlpProblem::new(synth.dataset.clone(), 0.01, 4, 3, GgnForm::Softmax).unwrap(),
        );
        let diagonal = ProblemOracle::CrossEntropyMlp(
            MlpProblem::new(synth.dataset, 0.01, 4, 3, GgnForm::DiagonalProbability).unwrap(),
        );
        let w = softmax.initial_point(1);
        let v = Array1::ones(softmax.dim());
        let batch = BatchSpec::full(12);
        let sharded = shard_batch(&batch, 3).unwrap();
        let mut ledger = CommLedger::default();
        assert!(matches!(
            sharded_ggn_vec(&softmax, &w, &v, &sharded, &mut ledger),
            Err(Error::UnsupportedLoss(_))
        ));
        let got = sharded_ggn_vec(&diagonal, &w, &v, &sharded, &mut ledger).unwrap();
        let reference = diagonal.ggn_vec(&w, &batch, &v).unwrap();
        let err = crate::linalg::rel_err_vec(&got.view(), &reference.view());
        assert!(err <= 1e-10, "diagonal-form sharding drifted: {err}");
    }

    fn spd_memory(rng: &mut ChaCha20Rng, d: usize, m: usize) -> (LbfgsMemory, Array1<f64>) {
        let mut l = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                l[[i, j]] = rng.random_range(-1.0..1.0);
            }
        }
        let spd = l.dot(&l.t()) + Array2::<f64>::eye(d) * 0.1;
        let mut mem = LbfgsMemory::new(m.max(1), DEFAULT_EPSILON).unwrap();
        for _ in 0..m {
            let s = random_vec(rng, d);
            let y = spd.dot(&s);
            assert!(mem.push_pair(s, y).unwrap());
        }
        let g = random_vec(rng, d);
        (mem, g)
    }

    #[test]
    fn recursion_round_is_identical_to_the_in_process_recursion() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for (m, workers, placement) in [
            (0usize, 3usize, PairPlacement::RoundRobin),
            (2, 3, PairPlacement::RoundRobin),
            (2, 6, PairPlacement::PerDotProduct),
            (5, 4, PairPlacement::RoundRobin),
            (1, 2, PairPlacement::PerDotProduct),
        ] {
            let d = rng.random_range(3..20usize);
            let (mem, g) = spd_memory(&mut rng, d, m);
            let h0 = InitialScale::diagonal(Array1::from_iter(
                (0..d).map(|_| rng.random_range(0.1..3.0)),
            ))
            .unwrap();
            let reference = vector_free_two_loop(&mem, &g, &h0).unwrap();
            let mut ledger = CommLedger::default();
            let got =
                distributed_recursion_round(&mem, &g, &h0, workers, placement, &mut ledger)
                    .unwrap();
            assert_eq!(got.direction, reference.direction, "m={m} tau={workers}");
            assert_eq!(got.deltas, reference.deltas);
            assert_eq!(got.alphas, reference.alphas);
            assert_eq!(
                ledger.recursion.reduced_scalars,
                (m * (m + 1) + m) as u64
            );
            assert_eq!(ledger.recursion.broadcast_scalars, d as u64);
        }
    }

    #[test]
    fn per_dot_product_placement_needs_enough_workers() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let (mem, g) = spd_memory(&mut rng, 6, 3);
        let mut ledger = CommLedger::default();
        assert!(matches!(
            distributed_recursion_round(
                &mem,
                &g,
                &InitialScale::Identity,
                5,
                PairPlacement::PerDotProduct,
                &mut ledger,
            ),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn step_totals_match_the_closed_forms_and_budget() {
        for d in [10usize, 100, 257] {
            for workers in [1usize, 2, 4, 8, 16] {
                for m in [0usize, 2, 5, 10] {
                    let expect = expected_step_scalars(d, workers, m);
                    let l = reduce_rounds_for(workers);
                    assert_eq!(expect.gradient, (d + d * l as usize) as u64);
                    assert_eq!(expect.curvature, (2 * d + d * l as usize) as u64);
                    assert_eq!(expect.recursion, (m * (m + 1) + m + d) as u64);
                    if workers >= 2 {
                        assert!(
                            within_budget(expect.total(), d, workers, m),
                            "budget violated at d={d} tau={workers} m={m}"
                        );
                    }
                }
            }
        }
    }
}
