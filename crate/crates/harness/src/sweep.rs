//! Robustness sweeps over pole length and action noise.

use serde::{Deserialize, Serialize};

use crate::build::{env_config, true_params};
use crate::config::{DistributionConfig, DistributionName, ExperimentConfig};
use crate::metrics::{aggregate, compute_metrics, AggregateReport, MetricsReport};
use crate::run::run_jobs;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum SweepAxis {
    /// Multiplies the true pole length; the controller's prior keeps the
    /// nominal value.
    PoleLength(Vec<f64>),
    /// White noise standard deviation added to every input channel.
    ActionNoise(Vec<f64>),
}

impl SweepAxis {
    pub fn values(&self) -> &[f64] {
        match self {
            SweepAxis::PoleLength(v) | SweepAxis::ActionNoise(v) => v,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PoleLength(_) => "pole_length",
            SweepAxis::ActionNoise(_) => "action_noise",
        }
    }

    /// The config of one grid point.
    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, HarnessError> {
        let mut out = cfg.clone();
        match self {
            SweepAxis::PoleLength(_) => {
                let nominal = true_params(cfg)?
                    .get("l")
                    .ok_or_else(|| HarnessError::Runtime(format!("{:?} has no pole length", cfg.system)))?;
                if let Some(existing) = out.randomization.params.get("l") {
                    if existing.kind != DistributionName::None {
                        return Err(HarnessError::Runtime(
                            "pole-length sweep conflicts with randomization.params.l".into(),
                        ));
                    }
                }
                // Randomization perturbs only the true system, so the prior
                // stays at the nominal length.
                out.randomization.params.insert(
                    "l".into(),
                    DistributionConfig::constant((value - 1.0) * nominal),
                );
            }
            SweepAxis::ActionNoise(_) => out.action_noise_std = value,
        }
        env_config(&out)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub aggregate: AggregateReport,
    /// One report per seed, in seed order.
    pub runs: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn mean_rmse(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.aggregate.rmse.mean).collect()
    }
}

/// Runs episode 0 of every (grid point, seed) pair. Failed episodes count as
/// incomplete and the sweep carries on.
pub fn robustness_sweep(
    cfg: &ExperimentConfig,
    axis: &SweepAxis,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<SweepReport, HarnessError> {
    if axis.values().is_empty() || seeds.is_empty() {
        return Err(HarnessError::Runtime("sweep needs grid values and seeds".into()));
    }
    let configs = axis
        .values()
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<_> = configs
        .iter()
        .flat_map(|c| seeds.iter().map(move |&s| (c.clone(), s, 0)))
        .collect();
    let traces = run_jobs(&jobs, workers)?;
    let mut points = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let task = env_config(c)?.task;
        let runs: Vec<_> = traces[i * seeds.len()..(i + 1) * seeds.len()]
            .iter()
            .map(|t| compute_metrics(t, &task))
            .collect();
        points.push(SweepPoint {
            value: axis.values()[i],
            aggregate: aggregate(&runs),
            runs,
        });
    }
    Ok(SweepReport {
        axis: axis.name().into(),
        seeds: seeds.to_vec(),
        points,
    })
}
