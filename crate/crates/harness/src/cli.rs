//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::benchmark_throughput;
use crate::build::env_config;
use crate::config::{dump_config, load_config, ExperimentConfig};
use crate::export::export_results;
use crate::metrics::compute_metrics;
use crate::run::run_experiment;
use crate::sweep::{robustness_sweep, SweepAxis};
use crate::HarnessError;

/// Environment variable that replaces the configured output root.
pub const RESULTS_DIR_VAR: &str = "SAFECTL_RESULTS_DIR";

const SCHEMA_HINT: &str = "see crates/harness/schema/experiment.schema.json for the configuration format";

#[derive(Debug, Parser)]
#[command(name = "safectl", version, about = "Safe-control benchmark experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (YAML).
    config: PathBuf,
    /// Replaces a config value, e.g. `controller.horizon=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct Output {
    /// Seeds to run instead of the configured list. Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root; defaults to $SAFECTL_RESULTS_DIR, then `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured seed and episode and export the results.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
    },
    /// Sweep pole length or action noise over a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        /// `pole-length=0.5,1,1.5` or `action-noise=0,0.1,0.2`.
        #[arg(long)]
        axis: String,
    },
    /// Measure simulation throughput.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Simulated seconds to run.
        #[arg(long, default_value_t = 20.0)]
        seconds: f64,
        /// Skip recording and serializing the trace.
        #[arg(long)]
        no_trace: bool,
    },
    /// Check a configuration without running it.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_axis(text: &str) -> Result<SweepAxis, String> {
    let (name, values) = text
        .split_once('=')
        .ok_or_else(|| format!("axis `{text}` is not NAME=V1,V2,..."))?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("axis value `{v}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match name {
        "pole-length" | "pole_length" => Ok(SweepAxis::PoleLength(values)),
        "action-noise" | "action_noise" => Ok(SweepAxis::ActionNoise(values)),
        _ => Err(format!("unknown axis `{name}`; use pole-length or action-noise")),
    }
}

fn output_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> PathBuf {
    let root = match (out, std::env::var_os(RESULTS_DIR_VAR)) {
        (Some(p), _) => p.clone(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => PathBuf::from(&cfg.output_dir),
    };
    root.join(&cfg.name)
}

fn load(common: &Common, seeds: &[u64]) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = load_config(&common.config, &common.overrides)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    Ok(cfg)
}

fn write(path: &Path, text: String) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Validate { common } => {
            load(&common, &[])?;
            println!("{}: ok", common.config.display());
        }
        Command::Run { common, output } => {
            let cfg = load(&common, &output.seeds)?;
            let task = env_config(&cfg)?.task;
            let traces = run_experiment(&cfg, output.workers)?;
            let reports: Vec<_> = traces.iter().map(|t| compute_metrics(t, &task)).collect();
            let dir = output_dir(&cfg, &output.out);
            export_results(&cfg, &traces, &reports, &dir)?;
            for (t, r) in traces.iter().zip(&reports) {
                println!(
                    "seed {} episode {}: rmse {:.6} violations {:.4} steps {} completed {}{}",
                    t.seed,
                    t.episode,
                    r.rmse,
                    r.violation_fraction,
                    r.steps,
                    r.completed,
                    t.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
                );
            }
            println!("results in {}", dir.display());
        }
        Command::Sweep { common, output, axis } => {
            let axis = parse_axis(&axis).map_err(HarnessError::Usage)?;
            let cfg = load(&common, &output.seeds)?;
            let report = robustness_sweep(&cfg, &axis, &cfg.seeds, output.workers)?;
            let dir = output_dir(&cfg, &output.out);
            write(&dir.join("config.yaml"), dump_config(&cfg))?;
            write(
                &dir.join(format!("sweep_{}.json", report.axis)),
                serde_json::to_string_pretty(&report)? + "\n",
            )?;
            for p in &report.points {
                println!(
                    "{} = {}: rmse {:.6} ± {:.6}, completed {}/{}",
                    report.axis, p.value, p.aggregate.rmse.mean, p.aggregate.rmse.std, p.aggregate.completed, p.aggregate.episodes
                );
            }
            println!("results in {}", dir.display());
        }
        Command::Bench {
            common,
            seconds,
            no_trace,
        } => {
            let cfg = load(&common, &[])?;
            let report = benchmark_throughput(&cfg, seconds, !no_trace)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns 0 on
/// success, 2 for usage or configuration errors and 1 for runtime failures.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ (HarnessError::Config(_) | HarnessError::Usage(_))) => {
            eprintln!("error: {e}\nhint: {SCHEMA_HINT}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
