use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bsde_core::experiments::{
    lookup, parse_config, registry, ExperimentConfig, ExperimentError, OracleBinding, Overrides, Reference,
};
use bsde_core::report::{write_compare_csv, write_run_csv, Footer, RunStatus};
use bsde_core::solver::{train_with, TrainError, TrainHistory, TrainRecord};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "bsde", version, about = "Deep BSDE experiments with asymptotic-expansion priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its history as CSV.
    Run(RunArgs),
    /// Train with and without the prior on the same seed and interleave both.
    Compare(RunArgs),
    /// Print the experiment registry.
    List,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long, overrides_with = "no_ae")]
    use_ae: bool,
    #[arg(long, overrides_with = "use_ae")]
    no_ae: bool,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    n_time: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    display_stride: Option<usize>,
    /// Destination CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` file using the same names as the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Paths for Monte Carlo oracles in the footer; 0 skips them.
    #[arg(long)]
    oracle_paths: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

/// Errors that map to the usage exit status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Resolved {
    experiment: ExperimentConfig,
    out: Option<PathBuf>,
}

fn resolve(args: &RunArgs) -> Result<Resolved> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_config(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
        }
        None => Default::default(),
    };
    let id = args
        .experiment
        .clone()
        .or(file.experiment)
        .ok_or_else(|| UsageError("--experiment is required (see `bsde list`)".into()))?;
    let flags = Overrides {
        use_ae: if args.use_ae {
            Some(true)
        } else if args.no_ae {
            Some(false)
        } else {
            None
        },
        learning_rate: args.learning_rate,
        n_time: args.n_time,
        batch_size: args.batch_size,
        valid_size: args.valid_size,
        max_steps: args.iters,
        seed: args.seed,
        display_stride: args.display_stride,
        ..Default::default()
    };
    let overrides = file.overrides.merged(&flags);
    let experiment = lookup(&id)
        .and_then(|cfg| cfg.with_overrides(&overrides))
        .map_err(|e| UsageError(e.to_string()))?;
    Ok(Resolved { experiment, out: args.out.clone().or(file.out.map(PathBuf::from)) })
}

fn reference(cfg: &ExperimentConfig, oracle_paths: Option<usize>) -> Result<Option<Reference>> {
    let mut cfg = cfg.clone();
    match (&mut cfg.oracle, oracle_paths) {
        (OracleBinding::None, _) => return Ok(None),
        (OracleBinding::ColeHopf { .. }, Some(0)) => return Ok(None),
        (OracleBinding::ColeHopf { n_paths }, Some(n)) => *n_paths = n,
        (OracleBinding::Literature { european_floor_paths, .. }, Some(n)) => {
            *european_floor_paths = european_floor_paths.and((n > 0).then_some(n));
        }
        _ => {}
    }
    match cfg.reference(cfg.rollout.seed) {
        Ok(r) => Ok(Some(r)),
        Err(ExperimentError::Oracle(e)) => Err(e).context("evaluating oracle"),
        Err(e) => Err(e.into()),
    }
}

fn train_quiet(cfg: &ExperimentConfig, quiet: bool, label: &str) -> Result<(TrainHistory, RunStatus)> {
    let problem = cfg.problem().map_err(|e| UsageError(e.to_string()))?;
    let progress = |r: &TrainRecord| {
        if !quiet {
            eprintln!("[{label}] step {:>6}  loss {:>12.6}  y0 {:>10.5}  {:>8.2}s", r.step, r.loss, r.y0, r.elapsed_s);
        }
    };
    match train_with(&cfg.rollout, &problem, progress) {
        Ok(out) => Ok((out.history, RunStatus::Completed)),
        Err(TrainError::Failed { step, source, history }) => {
            eprintln!("[{label}] training stopped at step {step}: {source}");
            Ok((history, RunStatus::Diverged { step }))
        }
        Err(TrainError::Setup(e)) => Err(UsageError(e.to_string()).into()),
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let Resolved { experiment, out } = resolve(args)?;
    let (history, status) = train_quiet(&experiment, args.quiet, experiment.id)?;
    let reference = reference(&experiment, args.oracle_paths)?;
    let footer = Footer {
        oracle: reference.map(|r| r.value),
        oracle_std_error: reference.map_or(0.0, |r| r.std_error),
        provenance: reference.map(|r| r.provenance),
        floor: reference.and_then(|r| r.floor).map(|f| f.value),
        status,
    };
    let mut w = open_out(out.as_deref())?;
    write_run_csv(&mut w, &history, &footer)?;
    w.flush()?;
    Ok(match status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::Diverged { .. } => ExitCode::from(EXIT_DIVERGED),
    })
}

fn compare(args: &RunArgs) -> Result<ExitCode> {
    let Resolved { experiment, out } = resolve(args)?;
    let mut with_ae = experiment.clone();
    with_ae.rollout.use_ae = true;
    let mut without = experiment;
    without.rollout.use_ae = false;
    let (a, sa) = train_quiet(&with_ae, args.quiet, "ae")?;
    let (b, sb) = train_quiet(&without, args.quiet, "no_ae")?;
    let mut w = open_out(out.as_deref())?;
    write_compare_csv(&mut w, &a, &b)?;
    w.flush()?;
    Ok(if sa == RunStatus::Completed && sb == RunStatus::Completed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_DIVERGED)
    })
}

fn list() -> Result<ExitCode> {
    let mut out = io::stdout().lock();
    writeln!(out, "{:<16} {:>3}  {:<16} {:<9} {:>9}  provenance", "id", "d", "driver", "variant", "oracle")?;
    for cfg in registry() {
        let (value, prov) = match cfg.expected {
            Some(e) => (format!("{}", e.value), e.provenance.to_string()),
            None => ("-".into(), "none".into()),
        };
        writeln!(
            out,
            "{:<16} {:>3}  {:<16} {:<9} {:>9}  {}",
            cfg.id, cfg.model.d, cfg.rollout.driver, cfg.rollout.variant, value, prov
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::List => list(),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        if e.downcast_ref::<UsageError>().is_some() {
            ExitCode::from(EXIT_USAGE)
        } else {
            ExitCode::FAILURE
        }
    })
}
