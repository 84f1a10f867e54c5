//! `clampsim run | validate | summarize`

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use clampsim::model::DualArmModel;
use clampsim::scenario::{has_errors, run_scenario, summarize_log, RunOptions, ScenarioConfig, Severity};

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "clampsim", version, about = "Dual-arm clamping controller and plant simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more scenarios.
    Run {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        /// Output root; each scenario writes to <out>/<name>/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the noise seed of every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Write every QP problem and solution to qp_dump.txt.
        #[arg(long)]
        dump_qp: bool,
        /// Log zero step times so that logs are byte-identical across runs.
        #[arg(long)]
        no_wall_time: bool,
        /// Scenarios run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Print nothing but errors.
        #[arg(long)]
        quiet: bool,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Recompute the summary of a log file.
    Summarize {
        log: PathBuf,
        /// Model file for joint-limit distances.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CLAMPSIM_LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { configs, out, seed, dump_qp, no_wall_time, jobs, quiet } => {
            let opts = RunOptions { out_dir: None, wall_time: !no_wall_time, dump_qp, seed };
            run_all(&configs, &out, &opts, jobs.max(1), quiet)
        }
        Command::Validate { config } => validate(&config),
        Command::Summarize { log, model } => match summarize(&log, model.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
    }
}

fn validate(path: &Path) -> ExitCode {
    let cfg = match ScenarioConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let diags = cfg.validate();
    for d in &diags {
        eprintln!("{}: {d}", path.display());
    }
    if has_errors(&diags) {
        ExitCode::from(EXIT_INVALID)
    } else {
        let warnings = diags.iter().filter(|d| d.severity == Severity::Warning).count();
        println!("{}: ok ({warnings} warning(s))", path.display());
        ExitCode::SUCCESS
    }
}

fn summarize(log: &Path, model: Option<&Path>) -> anyhow::Result<()> {
    let model = model.map(DualArmModel::load).transpose().context("loading model")?;
    let summary = summarize_log(log, model.as_ref()).with_context(|| format!("summarizing {}", log.display()))?;
    println!("{summary}");
    Ok(())
}

enum Failure {
    Invalid,
    Runtime,
}

fn run_one(path: &Path, out: &Path, opts: &RunOptions, quiet: bool) -> Result<(), Failure> {
    let cfg = ScenarioConfig::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        Failure::Invalid
    })?;
    let dir = match &cfg.output {
        Some(o) => out.join(o),
        None => out.join(&cfg.name),
    };
    let opts = RunOptions { out_dir: Some(dir.clone()), ..opts.clone() };
    match run_scenario(&cfg, &opts) {
        Ok(outcome) => {
            if !quiet {
                println!("== {} -> {}\n{}", cfg.name, dir.display(), outcome.summary);
            }
            Ok(())
        }
        Err(e) => {
            eprintln!("error: {}: {e}", cfg.name);
            Err(if e.is_validation() { Failure::Invalid } else { Failure::Runtime })
        }
    }
}

fn run_all(configs: &[PathBuf], out: &Path, opts: &RunOptions, jobs: usize, quiet: bool) -> ExitCode {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Result<(), Failure>> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..jobs.min(configs.len()))
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        let Some(path) = configs.get(i) else { break };
                        done.push(run_one(path, out, opts, quiet));
                    }
                    done
                })
            })
            .collect();
        workers.into_iter().flat_map(|w| w.join().unwrap_or_default()).collect()
    });
    if results.iter().any(|r| matches!(r, Err(Failure::Runtime))) {
        ExitCode::from(EXIT_RUNTIME)
    } else if results.iter().any(|r| matches!(r, Err(Failure::Invalid))) {
        ExitCode::from(EXIT_INVALID)
    } else {
        ExitCode::SUCCESS
    }
}

