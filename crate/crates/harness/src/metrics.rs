//! Per-episode and aggregate metrics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use safectl_core::envs::{quadratic_cost, TaskKind, TaskSpec};

use crate::build::position_channels;
use crate::run::EpisodeTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    /// Violating steps over executed steps; zero for an empty trace.
    pub violation_fraction: f64,
    pub total_cost: f64,
    pub completed: bool,
    pub steps: usize,
    /// Share of steps where the filter changed the input, if a filter ran.
    pub filter_modification_fraction: Option<f64>,
}

/// Root of the time-averaged squared error norm over states 1..=T. Tracking
/// scores the position channels only; stabilization scores the full state.
pub fn trace_rmse(trace: &EpisodeTrace, task: &TaskSpec) -> f64 {
    let steps = trace.steps();
    if steps == 0 {
        return 0.0;
    }
    let all: Vec<usize>;
    let channels: &[usize] = match task.kind {
        TaskKind::Tracking => position_channels(trace.system),
        TaskKind::Stabilization => {
            all = (0..trace.system.n_x()).collect();
            &all
        }
    };
    let sum: f64 = (1..=steps)
        .map(|t| {
            let (x, r) = (&trace.states[t], &trace.references[t]);
            channels.iter().map(|&c| (x[c] - r[c]).powi(2)).sum::<f64>()
        })
        .sum();
    (sum / steps as f64).sqrt()
}

pub fn compute_metrics(trace: &EpisodeTrace, task: &TaskSpec) -> MetricsReport {
    let steps = trace.steps();
    let frac = |flags: &[bool]| {
        if steps == 0 {
            0.0
        } else {
            flags.iter().filter(|&&v| v).count() as f64 / steps as f64
        }
    };
    // Costs beyond the task horizon or of mismatched length cannot occur for
    // traces produced by the runner; treat them as unscorable.
    let total_cost = quadratic_cost(task, &trace.states, &trace.applied).unwrap_or(f64::NAN);
    MetricsReport {
        rmse: trace_rmse(trace, task),
        violation_fraction: frac(&trace.violations),
        total_cost,
        completed: trace.completed(),
        steps,
        filter_modification_fraction: trace.has_filter.then(|| frac(&trace.filter_modified)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; NaN for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let v = DVector::from_column_slice(values);
        let mean = v.mean();
        let std = (v.map(|x| (x - mean).powi(2)).sum() / values.len() as f64).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub episodes: usize,
    pub completed: usize,
    pub rmse: MeanStd,
    pub violation_fraction: MeanStd,
    pub total_cost: MeanStd,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let column = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    AggregateReport {
        episodes: reports.len(),
        completed: reports.iter().filter(|r| r.completed).count(),
        rmse: MeanStd::of(&column(|r| r.rmse)),
        violation_fraction: MeanStd::of(&column(|r| r.violation_fraction)),
        total_cost: MeanStd::of(&column(|r| r.total_cost)),
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (MeanStd::of(&ra).mean, MeanStd::of(&rb).mean);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
