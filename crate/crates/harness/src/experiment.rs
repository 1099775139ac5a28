//! Grid execution and the on-disk run records.
//!
//! One experiment is the cross product `variants x alphas x batches x
//! memories x seeds`. Cells run independently, so the grid is executed on a
//! rayon pool; record order (and therefore every output file) is still the
//! deterministic nested-loop order, and identical configs with identical
//! seeds produce byte-identical files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use slbfgs::distributed::CommLedger;
use slbfgs::optimizer::{
    run_observed, NoopObserver, OptimizerConfig, RunRecord, RunSettings, Variant,
};
use slbfgs::{Error, Result};

use crate::config::{ExperimentConfig, OutputFormat};
use crate::problem::build_problem;
use crate::reference::{compute_reference, ReferenceSolution};

/// Exact header of every per-run CSV.
pub const CSV_HEADER: &str = "epoch,train_loss,subopt,test_error,grad_norm,skips,comm_scalars";

/// Environment variable consulted for the output directory when neither the
/// CLI nor the config names one.
pub const OUT_DIR_ENV: &str = "SLBFGS_OUT";

/// One point of the optimizer grid (seeds come on top).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub variant: Variant,
    pub alpha: f64,
    pub batch: usize,
    pub memory: usize,
}

impl GridCell {
    /// File stem of one run: `<variant>_a<alpha>_b<batch>_m<mem>_s<seed>`.
    pub fn stem(&self, seed: u64) -> String {
        format!(
            "{}_a{}_b{}_m{}_s{}",
            self.variant.name(),
            self.alpha,
            self.batch,
            self.memory,
            seed
        )
    }

    /// File stem of the per-cell min/mean/max curves.
    pub fn aggregate_stem(&self) -> String {
        format!(
            "{}_a{}_b{}_m{}_aggregate",
            self.variant.name(),
            self.alpha,
            self.batch,
            self.memory
        )
    }
}

/// One finished run.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: GridCell,
    pub seed: u64,
    pub record: RunRecord,
}

/// CLI-level knobs layered over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Replaces the config's seed list with this single seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub workers: Option<usize>,
}

/// Everything `run` produced, before exit-code judgement.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub runs: Vec<CellRun>,
    pub reference: ReferenceSolution,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub any_diverged: bool,
    /// True when the reference is not certified and the `subopt` column
    /// therefore carries raw training loss.
    pub subopt_is_training_loss: bool,
}

/// Output directory priority: CLI flag, then config, then the environment
/// variable, then `./results`.
pub fn resolve_out_dir(
    cli: Option<&Path>,
    config: Option<&Path>,
    env: Option<std::ffi::OsString>,
) -> PathBuf {
    if let Some(path) = cli {
        return path.to_path_buf();
    }
    if let Some(path) = config {
        return path.to_path_buf();
    }
    if let Some(value) = env {
        if !value.is_empty() {
            return PathBuf::from(value);
        }
    }
    PathBuf::from("results")
}

/// Run the whole grid and write every record under the resolved directory.
pub fn run_experiment(
    config: &ExperimentConfig,
    overrides: &Overrides,
) -> Result<ExperimentOutcome> {
    let built = build_problem(&config.problem)?;
    let workers = overrides.workers.unwrap_or(config.run.workers);
    let seeds: Vec<u64> = match overrides.seed {
        Some(seed) => vec![seed],
        None => config.run.seeds.clone(),
    };
    let jobs = grid_jobs(config, &seeds, workers)?;
    let reference = compute_reference(&built.oracle)?;

    let f_star = reference.certified.then_some(reference.f_star);
    let runs: Result<Vec<CellRun>> = jobs
        .into_par_iter()
        .map(|(cell, seed, opt)| {
            let settings = RunSettings {
                f_star,
                test_data: built.test_data(),
                stop_grad_norm: None,
            };
            let record = run_observed(
                &built.oracle,
                &opt,
                config.run.epochs,
                settings,
                &mut NoopObserver,
            )?;
            Ok(CellRun { cell, seed, record })
        })
        .collect();
    let runs = runs?;

    let out_dir = resolve_out_dir(
        overrides.out.as_deref(),
        config.run.out_dir.as_deref(),
        std::env::var_os(OUT_DIR_ENV),
    );
    let format = overrides
        .format
        .or(config.run.format)
        .unwrap_or_default();
    let subopt_is_training_loss = !reference.certified;
    let files = write_outputs(&out_dir, format, &runs, &reference, workers)?;

    let any_diverged = runs.iter().any(|run| run.record.diverged.is_some());
    Ok(ExperimentOutcome {
        runs,
        reference,
        out_dir,
        files,
        any_diverged,
        subopt_is_training_loss,
    })
}

/// Expand the grid in deterministic nested-loop order.
fn grid_jobs(
    config: &ExperimentConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<(GridCell, u64, OptimizerConfig)>> {
    if workers == 0 {
        return Err(Error::InvalidConfig("workers must be >= 1".into()));
    }
    let variants = config.variants()?;
    if workers > 1 {
        if let Some(v) = variants.iter().find(|v| **v != Variant::LbfgsF) {
            return Err(Error::InvalidConfig(format!(
                "workers > 1 requires lbfgs-f only, got {}",
                v.name()
            )));
        }
    }
    let grid = &config.optimizer;
    let mut jobs = Vec::new();
    for &variant in &variants {
        for &alpha in &grid.alphas {
            for &batch in &grid.batches {
                for &memory in &grid.memories {
                    for &seed in seeds {
                        let cell = GridCell {
                            variant,
                            alpha,
                            batch,
                            memory,
                        };
                        let opt =
                            config.optimizer_config(variant, alpha, batch, memory, seed, workers);
                        jobs.push((cell, seed, opt));
                    }
                }
            }
        }
    }
    Ok(jobs)
}

/// The `subopt` column value: distance to a certified reference, raw
/// training loss otherwise.
fn subopt_value(record: &RunRecord, row: usize) -> f64 {
    let r = &record.rows[row];
    r.subopt.unwrap_or(r.train_loss)
}

/// Per-run CSV body (header plus one line per recorded epoch).
pub fn run_csv(run: &CellRun) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, row) in run.record.rows.iter().enumerate() {
        let test = row
            .test_error
            .map(|e| e.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch,
            row.train_loss,
            subopt_value(&run.record, i),
            test,
            row.grad_norm,
            row.skips,
            row.comm_scalars
        ));
    }
    out
}

fn ledger_json(ledger: &CommLedger) -> serde_json::Value {
    let phase = |p: &slbfgs::distributed::PhaseCounters| {
        serde_json::json!({
            "broadcast_scalars": p.broadcast_scalars,
            "reduced_scalars": p.reduced_scalars,
            "reduce_rounds": p.reduce_rounds,
            "total_scalars": p.total_scalars(),
        })
    };
    serde_json::json!({
        "gradient": phase(&ledger.gradient),
        "curvature": phase(&ledger.curvature),
        "recursion": phase(&ledger.recursion),
        "total_scalars": ledger.total_scalars(),
    })
}

/// Per-run JSON document (same information as the CSV plus the ledger).
pub fn run_json(run: &CellRun) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = run
        .record
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            serde_json::json!({
                "epoch": row.epoch,
                "train_loss": row.train_loss,
                "subopt": subopt_value(&run.record, i),
                "test_error": row.test_error,
                "grad_norm": row.grad_norm,
                "skips": row.skips,
                "comm_scalars": row.comm_scalars,
            })
        })
        .collect();
    serde_json::json!({
        "variant": run.cell.variant.name(),
        "alpha": run.cell.alpha,
        "batch": run.cell.batch,
        "memory": run.cell.memory,
        "seed": run.seed,
        "f_star": run.record.f_star,
        "diverged": run.record.diverged.as_ref().map(|d| {
            serde_json::json!({ "step": d.step, "reason": d.reason })
        }),
        "ledger": ledger_json(&run.record.ledger),
        "rows": rows,
    })
}

/// Pointwise min/mean/max of the `subopt` axis across runs, truncated to the
/// shortest record. Pure function of the records, so aggregates can always
/// be recomputed from the per-run files.
pub fn aggregate_curves(records: &[&RunRecord]) -> Vec<(usize, f64, f64, f64)> {
    let Some(rows) = records.iter().map(|r| r.rows.len()).min() else {
        return Vec::new();
    };
    (0..rows)
        .map(|i| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for record in records {
                let v = subopt_value(record, i);
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            (i, lo, sum / records.len() as f64, hi)
        })
        .collect()
}

fn aggregate_csv(curves: &[(usize, f64, f64, f64)]) -> String {
    let mut out = String::from("epoch,subopt_min,subopt_mean,subopt_max\n");
    for (epoch, lo, mean, hi) in curves {
        out.push_str(&format!("{epoch},{lo},{mean},{hi}\n"));
    }
    out
}

fn write_outputs(
    out_dir: &Path,
    format: OutputFormat,
    runs: &[CellRun],
    reference: &ReferenceSolution,
    workers: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let ext = match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    };
    let mut files = Vec::new();

    for run in runs {
        let path = out_dir.join(format!("{}.{ext}", run.cell.stem(run.seed)));
        let body = match format {
            OutputFormat::Csv => run_csv(run),
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(&run_json(run))
                    .expect("run records serialize");
                s.push('\n');
                s
            }
        };
        std::fs::write(&path, body)?;
        files.push(path);
    }

    // One aggregate per distinct cell, in first-appearance order.
    let mut cells: Vec<GridCell> = Vec::new();
    for run in runs {
        if !cells.contains(&run.cell) {
            cells.push(run.cell);
        }
    }
    for cell in &cells {
        let records: Vec<&RunRecord> = runs
            .iter()
            .filter(|r| r.cell == *cell)
            .map(|r| &r.record)
            .collect();
        let curves = aggregate_curves(&records);
        let path = out_dir.join(format!("{}.{ext}", cell.aggregate_stem()));
        let body = match format {
            OutputFormat::Csv => aggregate_csv(&curves),
            OutputFormat::Json => {
                let rows: Vec<serde_json::Value> = curves
                    .iter()
                    .map(|(epoch, lo, mean, hi)| {
                        serde_json::json!({
                            "epoch": epoch,
                            "subopt_min": lo,
                            "subopt_mean": mean,
                            "subopt_max": hi,
                        })
                    })
                    .collect();
                let mut s = serde_json::to_string_pretty(&rows).expect("curves serialize");
                s.push('\n');
                s
            }
        };
        std::fs::write(&path, body)?;
        files.push(path);
    }

    let mut meta = serde_json::json!({
        "reference": reference.to_json(),
        "subopt_is_training_loss": !reference.certified,
        "workers": workers,
        "runs": runs.iter().map(|r| r.cell.stem(r.seed)).collect::<Vec<_>>(),
        "diverged": runs
            .iter()
            .filter_map(|r| {
                r.record.diverged.as_ref().map(|d| {
                    serde_json::json!({
                        "run": r.cell.stem(r.seed),
                        "step": d.step,
                        "reason": d.reason,
                    })
                })
            })
            .collect::<Vec<_>>(),
    });
    if workers > 1 {
        let ledgers: serde_json::Map<String, serde_json::Value> = runs
            .iter()
            .map(|r| (r.cell.stem(r.seed), ledger_json(&r.record.ledger)))
            .collect();
        meta["ledger"] = serde_json::Value::Object(ledgers);
    }
    let meta_path = out_dir.join("meta.json");
    let mut body = serde_json::to_string_pretty(&meta).expect("meta serializes");
    body.push('\n');
    std::fs::write(&meta_path, body)?;
    files.push(meta_path);

    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::config::ExperimentConfig;

    fn tiny_config(extra_run: &str) -> ExperimentConfig {
        let doc = format!(
            "[problem]\nkind = \"logistic\"\ntest_fraction = 0.2\n\
             [problem.synth]\nn = 50\nd = 4\nseed = 5\nnoise = 0.2\n\
             [optimizer]\nvariants = [\"lbfgs-h\", \"adam\"]\nalphas = [0.05]\n\
             batches = [10]\nmemories = [5]\n\
             [run]\nepochs = 3\nseeds = [0, 1]\n{extra_run}"
        );
        ExperimentConfig::from_toml(&doc).unwrap()
    }

    #[test]
    fn the_grid_expands_in_nested_loop_order() {
        let config = tiny_config("");
        let jobs = grid_jobs(&config, &[0, 1], 1).unwrap();
        let stems: Vec<String> = jobs.iter().map(|(c, s, _)| c.stem(*s)).collect();
        assert_eq!(
            stems,
            vec![
                "lbfgs-h_a0.05_b10_m5_s0",
                "lbfgs-h_a0.05_b10_m5_s1",
                "adam_a0.05_b10_m5_s0",
                "adam_a0.05_b10_m5_s1",
            ]
        );
    }

    #[test]
    fn identical_configs_write_identical_bytes() {
        let config = tiny_config("");
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let over = |d: &Path| Overrides {
            out: Some(d.to_path_buf()),
            ..Overrides::default()
        };
        let a = run_experiment(&config, &over(dir_a.path())).unwrap();
        let b = run_experiment(&config, &over(dir_b.path())).unwrap();
        assert_eq!(a.files.len(), b.files.len());
        for (fa, fb) in a.files.iter().zip(&b.files) {
            assert_eq!(fa.file_name(), fb.file_name());
            let ba = std::fs::read(fa).unwrap();
            let bb = std::fs::read(fb).unwrap();
            assert_eq!(ba, bb, "{:?} differs between reruns", fa.file_name());
        }
    }

    #[test]
    fn per_run_files_carry_the_exact_header_and_certified_subopt() {
        let config = tiny_config("");
        let dir = tempfile::tempdir().unwrap();
        let overrides = Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let outcome = run_experiment(&config, &overrides).unwrap();
        assert!(!outcome.subopt_is_training_loss);
        assert!(outcome.reference.certified);

        let path = dir.path().join("lbfgs-h_a0.05_b10_m5_s0.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        // epochs + 1 rows: the initial point plus one row per epoch.
        assert_eq!(lines.clone().count(), 4);
        // subopt = train_loss - f_star, per row.
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 7);
            let train: f64 = fields[1].parse().unwrap();
            let subopt: f64 = fields[2].parse().unwrap();
            assert!((train - outcome.reference.f_star - subopt).abs() < 1e-12);
            // Held-out data exists, so the test column is populated.
            assert!(!fields[3].is_empty());
        }
    }

    #[test]
    fn nonconvex_references_fall_back_to_training_loss() {
        let doc = "[problem]\nkind = \"cross-entropy\"\ntest_fraction = 0.0\n\
                   [problem.synth]\nn = 30\nd = 4\nclasses = 3\n\
                   [optimizer]\nvariants = [\"adam\"]\nalphas = [0.05]\n\
                   batches = [10]\nmemories = [0]\n[run]\nepochs = 2\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let overrides = Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let outcome = run_experiment(&config, &overrides).unwrap();
        assert!(outcome.subopt_is_training_loss);

        let path = dir.path().join("adam_a0.05_b10_m0_s0.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[1], fields[2], "subopt must mirror train_loss");
            assert!(fields[3].is_empty(), "no held-out data, empty test column");
        }
    }

    #[test]
    fn aggregates_bound_the_mean_between_min_and_max() {
        let config = tiny_config("");
        let dir = tempfile::tempdir().unwrap();
        let overrides = Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let outcome = run_experiment(&config, &overrides).unwrap();
        let records: Vec<&RunRecord> = outcome
            .runs
            .iter()
            .filter(|r| r.cell.variant == Variant::LbfgsH)
            .map(|r| &r.record)
            .collect();
        assert_eq!(records.len(), 2);
        let curves = aggregate_curves(&records);
        assert_eq!(curves.len(), 4);
        for (epoch, lo, mean, hi) in curves {
            assert!(lo <= mean && mean <= hi, "epoch {epoch}: {lo} {mean} {hi}");
        }
        let agg = dir.path().join("lbfgs-h_a0.05_b10_m5_aggregate.csv");
        let text = std::fs::read_to_string(agg).unwrap();
        assert!(text.starts_with("epoch,subopt_min,subopt_mean,subopt_max\n"));
    }

    #[test]
    fn sharded_runs_report_their_ledger_in_meta() {
        let doc = "[problem]\nkind = \"logistic\"\ntest_fraction = 0.0\n\
                   [problem.synth]\nn = 40\nd = 4\n\
                   [optimizer]\nvariants = [\"lbfgs-f\"]\nalphas = [0.05]\n\
                   batches = [8]\nmemories = [3]\n[run]\nepochs = 2\nworkers = 4\n";
        let config = ExperimentConfig::from_toml(doc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let overrides = Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let outcome = run_experiment(&config, &overrides).unwrap();
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("meta.json")).unwrap())
                .unwrap();
        let ledger = &meta["ledger"]["lbfgs-f_a0.05_b8_m3_s0"];
        assert!(ledger["total_scalars"].as_u64().unwrap() > 0);
        assert!(ledger["recursion"]["reduce_rounds"].as_u64().unwrap() > 0);
        assert!(!outcome.any_diverged);
    }

    #[test]
    fn out_dir_priority_is_cli_config_env_default() {
        let cli = Path::new("from-cli");
        let cfg = Path::new("from-config");
        let env = Some(std::ffi::OsString::from("from-env"));
        assert_eq!(
            resolve_out_dir(Some(cli), Some(cfg), env.clone()),
            PathBuf::from("from-cli")
        );
        assert_eq!(
            resolve_out_dir(None, Some(cfg), env.clone()),
            PathBuf::from("from-config")
        );
        assert_eq!(resolve_out_dir(None, None, env), PathBuf::from("from-env"));
        assert_eq!(resolve_out_dir(None, None, None), PathBuf::from("results"));
        // Empty environment values are ignored, not used as a directory.
        assert_eq!(
            resolve_out_dir(None, None, Some(std::ffi::OsString::new())),
            PathBuf::from("results")
        );
    }
}
