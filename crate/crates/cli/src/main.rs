//! `aggspread`: run scenarios and sweeps, audit entropy of snapshots, fit decay rates.
//!
//! Exit codes: 0 when every run completed, 2 when a blow-up was detected,
//! 1 on any error (including runs that exhausted the domain).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aggspread::entropy::EntropyReport;
use aggspread::experiment::{fit_rate, lambda_sweep, run_single, ScenarioConfig};
use aggspread::solver::{read_diagnostics_jsonl, TerminationStatus};
use aggspread::DensityField;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aggspread", version, about = "Radial aggregation-diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario at a single λ and write its artifacts.
    Simulate {
        config: PathBuf,
        /// λ to run; required when the scenario lists several.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run every λ of the scenario, classify each run and bracket λ₀.
    Sweep { config: PathBuf },
    /// Entropy report (one JSON line) per density snapshot.
    EntropyAudit {
        #[arg(required = true)]
        snapshots: Vec<PathBuf>,
        #[arg(long)]
        mass: f64,
        #[arg(long = "dim")]
        dim: usize,
    },
    /// Power-law fit `y ≈ C t^p` of one diagnostics series.
    Fit {
        diagnostics: PathBuf,
        #[arg(long)]
        series: String,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        window: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Clock::T)]
        clock: Clock,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    /// Physical time.
    T,
    /// Similarity time.
    Tau,
    /// Integration time of the run.
    Time,
}

impl Clock {
    fn name(self) -> &'static str {
        match self {
            Clock::T => "t",
            Clock::Tau => "tau",
            Clock::Time => "time",
        }
    }
}

fn exit_code(statuses: impl IntoIterator<Item = TerminationStatus>) -> u8 {
    let mut code = 0;
    for s in statuses {
        match s {
            TerminationStatus::DomainExhausted => return 1,
            TerminationStatus::BlowupDetected => code = 2,
            TerminationStatus::Completed => {}
        }
    }
    code
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn simulate(config: &Path, lambda: Option<f64>) -> Result<u8> {
    let cfg = ScenarioConfig::load(config)?;
    let lambdas = cfg.lambdas()?;
    let lambda = match (lambda, lambdas.as_slice()) {
        (Some(l), _) => l,
        (None, [l]) => *l,
        (None, _) => bail!("{} lists {} λ values; pass --lambda or use `sweep`", config.display(), lambdas.len()),
    };
    if !(lambda >= 1.0) {
        bail!("λ must be >= 1, got {lambda}");
    }
    let dir = cfg.output_dir().join(format!("lambda_{lambda}"));
    let (record, _) = run_single(&cfg, lambda, Some(&dir))?;
    eprintln!("{}: {} after {} steps; artifacts in {}", cfg.name, record.status.as_str(), record.steps, dir.display());
    print_json(&record)?;
    Ok(exit_code([record.status]))
}

fn sweep(config: &Path) -> Result<u8> {
    let mut cfg = ScenarioConfig::load(config)?;
    let dir = cfg.output_dir();
    cfg.output.dir = Some(dir.clone());
    let result = lambda_sweep(&cfg)?;
    eprintln!("{}: {} runs; summary in {}", cfg.name, result.runs.len(), dir.join("sweep.json").display());
    print_json(&result)?;
    Ok(exit_code(result.runs.iter().map(|r| r.status)))
}

fn entropy_audit(snapshots: &[PathBuf], mass: f64, dim: usize) -> Result<u8> {
    let mut out = std::io::stdout().lock();
    for path in snapshots {
        let theta = DensityField::read_csv(path, dim)?;
        let report = EntropyReport::audit(&theta, mass, dim).with_context(|| format!("auditing {}", path.display()))?;
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
    }
    Ok(0)
}

fn fit(diagnostics: &Path, series: &str, window: &[f64], clock: Clock) -> Result<u8> {
    let samples = read_diagnostics_jsonl(diagnostics)?;
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter_map(|s| {
            let x = match clock {
                Clock::T => Some(s.t),
                Clock::Tau => s.tau,
                Clock::Time => Some(s.time),
            }?;
            Some((x, s.series(series)?))
        })
        .collect();
    if samples.first().is_some_and(|s| s.series(series).is_none()) && points.is_empty() {
        bail!("series `{series}` has no values in {}", diagnostics.display());
    }
    let fit = fit_rate(&points, (window[0], window[1]))
        .with_context(|| format!("fitting `{series}` against {} in {}", clock.name(), diagnostics.display()))?;
    print_json(&serde_json::json!({
        "series": series,
        "clock": clock.name(),
        "window": window,
        "exponent": fit.exponent,
        "intercept": fit.intercept,
        "r2": fit.r2,
        "stderr": fit.stderr,
        "samples": fit.samples,
    }))?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Simulate { config, lambda } => simulate(&config, lambda),
        Command::Sweep { config } => sweep(&config),
        Command::EntropyAudit { snapshots, mass, dim } => entropy_audit(&snapshots, mass, dim),
        Command::Fit { diagnostics, series, window, clock } => fit(&diagnostics, &series, &window, clock),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
