//! Command-line entry point.
//!
//! Subcommands: `run` (execute the experiment grid), `reference` (solve and
//! store the reference minimum), `check-theory` (run the analysis battery),
//! and `selftest` (fast build smoke test). Exit codes: 0 success, 1 usage or
//! configuration error, 2 diverged runs or failed checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slbfgs_harness::config::{ExperimentConfig, OutputFormat};
use slbfgs_harness::experiment::{resolve_out_dir, run_experiment, Overrides, OUT_DIR_ENV};
use slbfgs_harness::problem::build_problem;
use slbfgs_harness::reference::compute_reference;
use slbfgs_harness::selftest::run_selftest;
use slbfgs_harness::theory_report::run_theory_checks;

/// `println!` that treats a closed stdout (piping into `head`, say) as a
/// request to stop rather than a reason to panic.
macro_rules! say {
    ($($arg:tt)*) => {
        crate::emit(std::format_args!($($arg)*))
    };
}

fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let result = out.write_fmt(args).and_then(|()| out.write_all(b"\n"));
    if let Err(e) = result {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        std::process::exit(1);
    }
}

/// Stochastic L-BFGS benchmark harness.
#[derive(Parser)]
#[command(name = "slbfgs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid and write one record per run.
    Run(RunArgs),
    /// Solve the configured problem to reference precision and store it.
    Reference(ReferenceArgs),
    /// Numerically check the convergence-analysis quantities.
    CheckTheory(CheckTheoryArgs),
    /// Fast sweep of the load-bearing numeric invariants.
    Selftest {
        /// Print failures only.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment document (TOML).
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record format.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Simulated data-parallel width (lbfgs-f grids only).
    #[arg(long)]
    workers: Option<usize>,
    /// Suppress progress lines; errors still reach stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Experiment document (TOML).
    config: PathBuf,
    /// Output directory for `reference.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CheckTheoryArgs {
    /// Experiment document (TOML).
    config: PathBuf,
    /// Print failing reports only.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error, printed with the usage string clap attaches.
            let code = if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                0
            } else {
                1
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Reference(args) => cmd_reference(args),
        Command::CheckTheory(args) => cmd_check_theory(args),
        Command::Selftest { quiet } => cmd_selftest(quiet),
    }
}

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let config = match ExperimentConfig::load(&args.config) {
        Ok(config) => config,
        Err(e) => return config_error(e),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        format: args.format,
        workers: args.workers,
    };
    let outcome = match run_experiment(&config, &overrides) {
        Ok(outcome) => outcome,
        Err(e) => return config_error(e),
    };
    if !args.quiet {
        let reference = &outcome.reference;
        say!(
            "reference: f_star = {:.12e} (grad norm {:.3e}, certified: {}, {} iterations)",
            reference.f_star, reference.grad_norm, reference.certified, reference.iterations
        );
        if outcome.subopt_is_training_loss {
            say!("note: no certified minimum; the subopt column carries raw training loss");
        }
        for run in &outcome.runs {
            let row = run.record.final_row();
            let mut line = format!(
                "{}: train loss {:.6e}, grad norm {:.3e}, {} skips",
                run.cell.stem(run.seed),
                row.train_loss,
                row.grad_norm,
                row.skips
            );
            if let Some(d) = &run.record.diverged {
                line.push_str(&format!(" [diverged at step {}: {}]", d.step, d.reason));
            }
            say!("{line}");
        }
        say!(
            "wrote {} files to {}",
            outcome.files.len(),
            outcome.out_dir.display()
        );
    }
    if outcome.any_diverged {
        let n = outcome
            .runs
            .iter()
            .filter(|r| r.record.diverged.is_some())
            .count();
        eprintln!("{n} run(s) diverged");
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_reference(args: ReferenceArgs) -> ExitCode {
    let config = match ExperimentConfig::load(&args.config) {
        Ok(config) => config,
        Err(e) => return config_error(e),
    };
    let built = match build_problem(&config.problem) {
        Ok(built) => built,
        Err(e) => return config_error(e),
    };
    let reference = match compute_reference(&built.oracle) {
        Ok(reference) => reference,
        Err(e) => return config_error(e),
    };
    let out_dir = resolve_out_dir(
        args.out.as_deref(),
        config.run.out_dir.as_deref(),
        std::env::var_os(OUT_DIR_ENV),
    );
    let path = out_dir.join("reference.json");
    let write = std::fs::create_dir_all(&out_dir).and_then(|()| {
        let mut body = serde_json::to_string_pretty(&reference.to_json())
            .expect("reference serializes");
        body.push('\n');
        std::fs::write(&path, body)
    });
    if let Err(e) = write {
        return config_error(format!("cannot write {}: {e}", path.display()));
    }
    if !args.quiet {
        say!(
            "reference: f_star = {:.12e}, grad norm {:.3e}, certified: {}, {} iterations",
            reference.f_star, reference.grad_norm, reference.certified, reference.iterations
        );
        say!("wrote {}", path.display());
    }
    ExitCode::SUCCESS
}

fn cmd_check_theory(args: CheckTheoryArgs) -> ExitCode {
    let config = match ExperimentConfig::load(&args.config) {
        Ok(config) => config,
        Err(e) => return config_error(e),
    };
    let outcome = match run_theory_checks(&config) {
        Ok(outcome) => outcome,
        Err(e) => return config_error(e),
    };
    for line in outcome.lines() {
        if !args.quiet || line.contains("FAIL") {
            say!("{line}");
        }
    }
    if outcome.passed() {
        if !args.quiet {
            say!("all checks passed");
        }
        ExitCode::SUCCESS
    } else {
        eprintln!("theory checks failed");
        ExitCode::from(2)
    }
}

fn cmd_selftest(quiet: bool) -> ExitCode {
    let items = run_selftest();
    let mut failed = 0usize;
    for item in &items {
        if !item.passed() {
            failed += 1;
        }
        if !quiet || !item.passed() {
            say!("{}", item.line());
        }
    }
    if failed == 0 {
        if !quiet {
            say!("selftest: {} items ok", items.len());
        }
        ExitCode::SUCCESS
    } else {
        eprintln!("selftest: {failed} item(s) failed");
        ExitCode::from(2)
    }
}
