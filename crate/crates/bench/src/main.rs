use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ftpose_bench::{
    bench_csv, curve_csv, grid_csv, grid_table, run_bench, run_dump_synth, run_gradcheck, run_ratio_grid,
    run_train_smoke, BenchConfig, BenchError, Overrides,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ftpose", version, about = "Benchmarks and checks for the multi-grained pose model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// High-resolution branch pruning ratio
    #[arg(long, global = true)]
    eps_hrb: Option<usize>,
    /// Low-resolution branch pruning ratio
    #[arg(long, global = true)]
    eps_lrb: Option<usize>,
    /// Report path (JSON); a CSV is written next to it
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Timed iterations (bench) or training steps (train-smoke)
    #[arg(long, global = true)]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Time the baseline, unpruned and pruned encoders
    Bench,
    /// Train and time every pair of pruning ratios
    RatioGrid,
    /// Compare analytic gradients with central differences
    Gradcheck {
        /// Add an error to one parameter's gradient (negative control)
        #[arg(long, hide = true, value_name = "NAME")]
        corrupt_grad: Option<String>,
    },
    /// Short training run that must halve the loss
    TrainSmoke,
    /// Write synthetic frames as PGM images plus keypoint JSON
    DumpSynth {
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
}

enum Failure {
    Check(String),
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(common: &Common, train_iters: bool) -> Result<BenchConfig, Failure> {
    let base = match &common.config {
        Some(path) => BenchConfig::load(path)?,
        None => BenchConfig::default(),
    };
    let mut o = Overrides {
        seed: common.seed,
        eps_hrb: common.eps_hrb,
        eps_lrb: common.eps_lrb,
        out: common.out.clone(),
        iters: common.iters,
    };
    let mut cfg = base;
    if train_iters {
        if let Some(steps) = o.iters.take() {
            cfg.train.steps = steps;
        }
    }
    cfg = cfg.apply(&o);
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(out: Option<&Path>, report: &T, csv: Option<String>) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => {
            std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
            if let Some(csv) = csv {
                let csv_path = path.with_extension("csv");
                std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
            }
            eprintln!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Bench => {
            let cfg = resolve(&cli.common, false)?;
            let report = run_bench(&cfg)?;
            for v in &report.variants {
                eprintln!(
                    "{:<9} eps {}/{}  {:>7.1} MMAC  {:>8.2} ms mean  {:>6.2} triplets/s",
                    format!("{:?}", v.variant).to_lowercase(),
                    v.eps_hrb,
                    v.eps_lrb,
                    v.macs as f64 / 1e6,
                    v.latency.mean_ms,
                    v.latency.throughput
                );
            }
            emit(cfg.out.as_deref(), &report, Some(bench_csv(&report)?))?;
        }
        Command::RatioGrid => {
            let cfg = resolve(&cli.common, false)?;
            let report = run_ratio_grid(&cfg)?;
            eprint!("{}", grid_table(&report));
            emit(cfg.out.as_deref(), &report, Some(grid_csv(&report)?))?;
            if let Some(bad) = report.cells.iter().find(|c| c.error.is_some()) {
                return Err(Failure::Check(format!(
                    "cell ({}, {}) failed: {}",
                    bad.eps_hrb,
                    bad.eps_lrb,
                    bad.error.as_deref().unwrap_or_default()
                )));
            }
        }
        Command::Gradcheck { corrupt_grad } => {
            let cfg = resolve(&cli.common, false)?;
            let outcome = run_gradcheck(&cfg, corrupt_grad.map(|n| (n, 1e-2)))?;
            emit(cfg.out.as_deref(), &outcome, None)?;
            if !outcome.passed {
                return Err(Failure::Check(format!(
                    "relative error {:.3e} in {} exceeds {:e}",
                    outcome.report.max_rel_err, outcome.report.worst, outcome.tolerance
                )));
            }
            eprintln!("gradcheck passed: max relative error {:.3e}", outcome.report.max_rel_err);
        }
        Command::TrainSmoke => {
            let cfg = resolve(&cli.common, true)?;
            let report = match run_train_smoke(&cfg) {
                Err(BenchError::Model(e @ ftpose::Error::Training { .. })) => {
                    return Err(Failure::Check(e.to_string()))
                }
                other => other?,
            };
            emit(cfg.out.as_deref(), &report, Some(curve_csv(&report.curve)?))?;
            if !report.passed {
                return Err(Failure::Check(format!(
                    "loss went from {:.6} to {:.6} ({:.1}%), needs <= 50%",
                    report.initial,
                    report.final_loss,
                    100.0 * report.ratio
                )));
            }
            eprintln!("train-smoke passed: loss {:.6} -> {:.6}", report.initial, report.final_loss);
        }
        Command::DumpSynth { frames } => {
            let cfg = resolve(&cli.common, false)?;
            let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("synth_dump"));
            let n = run_dump_synth(&cfg, &dir, frames)?;
            eprintln!("wrote {n} frames to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
