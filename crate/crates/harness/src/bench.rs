//! Simulation throughput.

use std::time::Instant;

use serde::Serialize;

use crate::build::env_config;
use crate::config::ExperimentConfig;
use crate::export::write_trace_csv;
use crate::run::simulate;
use crate::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub simulated_seconds: f64,
    pub wall_seconds: f64,
    pub control_steps: usize,
    pub physics_steps: usize,
    pub physics_steps_per_second: f64,
    /// Simulated seconds per wall-clock second.
    pub realtime_factor: f64,
    pub trace_logging: bool,
}

/// Runs consecutive episodes of seed `cfg.seeds[0]` until `sim_seconds`
/// of simulated time have passed. With `log_trace` every step is recorded
/// and each episode is serialized to CSV in memory.
pub fn benchmark_throughput(cfg: &ExperimentConfig, sim_seconds: f64, log_trace: bool) -> Result<BenchReport, HarnessError> {
    if !(sim_seconds > 0.0) {
        return Err(HarnessError::Runtime("benchmark duration must be positive".into()));
    }
    let env = env_config(cfg)?;
    let dt = env.control_dt();
    let seed = cfg.seeds[0];
    let mut steps = 0usize;
    let mut episode = 0u64;
    let mut sink = Vec::new();
    let start = Instant::now();
    while (steps as f64) * dt < sim_seconds {
        let (trace, executed) = simulate(cfg, seed, episode, log_trace)?;
        if let Some(e) = trace.error {
            return Err(HarnessError::Runtime(format!("benchmark episode {episode}: {e}")));
        }
        if executed == 0 {
            return Err(HarnessError::Runtime("benchmark episode made no progress".into()));
        }
        if log_trace {
            sink.clear();
            write_trace_csv(&trace, &mut sink).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        }
        steps += executed;
        episode += 1;
    }
    let wall = start.elapsed().as_secs_f64();
    let simulated = steps as f64 * dt;
    let physics_steps = steps * env.substeps();
    Ok(BenchReport {
        simulated_seconds: simulated,
        wall_seconds: wall,
        control_steps: steps,
        physics_steps,
        physics_steps_per_second: physics_steps as f64 / wall,
        realtime_factor: simulated / wall,
        trace_logging: log_trace,
    })
}
