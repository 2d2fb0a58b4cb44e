//! Result files: config copy, aggregate JSON, one CSV per episode.
//!
//! Trace CSV layout (version 1). The first line is the version comment,
//! the second the header. Row `t` holds state `t`; the action columns of
//! row `t` hold the input that produced it, so row 0 leaves them empty.
//!
//! | column            | meaning                                      |
//! |-------------------|----------------------------------------------|
//! | `step`            | state index                                  |
//! | `time`            | `step * dt` in seconds                       |
//! | `x_<label>`       | true state                                   |
//! | `obs_<label>`     | observation given to the controller          |
//! | `ref_<label>`     | reference state                              |
//! | `u_prop_<label>`  | input proposed by the controller             |
//! | `u_dist_<label>`  | input after the filter and action noise      |
//! | `u_app_<label>`   | input after clipping, as applied             |
//! | `reward`          | reward of the step                           |
//! | `max_constraint`  | largest constraint value, empty without any  |
//! | `violation`       | 1 if any constraint value exceeded tolerance |
//! | `filter_modified` | 1 if a safety filter changed the input       |

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DVector;
use serde::Serialize;

use crate::config::{dump_config, ExperimentConfig};
use crate::metrics::{aggregate, AggregateReport, MetricsReport};
use crate::run::EpisodeTrace;
use crate::HarnessError;

pub const TRACE_FORMAT_LINE: &str = "# safectl trace format v1";

pub fn trace_file_name(trace: &EpisodeTrace) -> String {
    format!("trace_seed{}_ep{}.csv", trace.seed, trace.episode)
}

pub fn trace_header(trace: &EpisodeTrace) -> Vec<String> {
    let xs = trace.system.state_labels();
    let us = trace.system.input_labels();
    let mut cols = vec!["step".to_string(), "time".to_string()];
    for prefix in ["x", "obs", "ref"] {
        cols.extend(xs.iter().map(|l| format!("{prefix}_{l}")));
    }
    for prefix in ["u_prop", "u_dist", "u_app"] {
        cols.extend(us.iter().map(|l| format!("{prefix}_{l}")));
    }
    cols.extend(["reward", "max_constraint", "violation", "filter_modified"].map(String::from));
    cols
}

fn push_float(row: &mut String, buf: &mut ryu::Buffer, x: f64) {
    // ryu renders non-finite values as "NaN"/"inf", which CSV readers accept.
    row.push_str(buf.format(x));
}

fn push_vector(row: &mut String, buf: &mut ryu::Buffer, v: Option<&DVector<f64>>, len: usize) {
    for i in 0..len {
        row.push(',');
        if let Some(v) = v {
            push_float(row, buf, v[i]);
        }
    }
}

/// Serializes a trace; floats use the shortest form that round-trips.
pub fn write_trace_csv(trace: &EpisodeTrace, out: &mut impl Write) -> std::io::Result<()> {
    let (n, m) = (trace.system.n_x(), trace.system.n_u());
    let mut buf = ryu::Buffer::new();
    writeln!(out, "{TRACE_FORMAT_LINE}")?;
    writeln!(out, "{}", trace_header(trace).join(","))?;
    let mut row = String::new();
    for t in 0..=trace.steps() {
        row.clear();
        let _ = write!(row, "{t},");
        push_float(&mut row, &mut buf, t as f64 * trace.dt);
        push_vector(&mut row, &mut buf, Some(&trace.states[t]), n);
        push_vector(&mut row, &mut buf, Some(&trace.observations[t]), n);
        push_vector(&mut row, &mut buf, Some(&trace.references[t]), n);
        let k = t.checked_sub(1);
        for inputs in [&trace.proposed, &trace.disturbed, &trace.applied] {
            push_vector(&mut row, &mut buf, k.map(|k| &inputs[k]), m);
        }
        match k {
            None => row.push_str(",,,,"),
            Some(k) => {
                let c = &trace.constraint_values[k];
                row.push(',');
                push_float(&mut row, &mut buf, trace.rewards[k]);
                row.push(',');
                if !c.is_empty() {
                    push_float(&mut row, &mut buf, c.max());
                }
                row.push_str(if trace.violations[k] { ",1" } else { ",0" });
                row.push_str(if trace.filter_modified[k] { ",1" } else { ",0" });
            }
        }
        row.push('\n');
        out.write_all(row.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EpisodeEntry<'a> {
    seed: u64,
    episode: u64,
    trace_file: String,
    failed: bool,
    terminated: bool,
    error: &'a Option<String>,
    metrics: &'a MetricsReport,
}

#[derive(Debug, Clone, Serialize)]
struct Report<'a> {
    name: &'a str,
    system: &'static str,
    seeds: &'a [u64],
    aggregate: AggregateReport,
    episodes: Vec<EpisodeEntry<'a>>,
}

#[derive(Debug, Clone, Serialize)]
struct Metadata {
    created_unix_seconds: u64,
    episode_wall_seconds: Vec<f64>,
}

/// Files written by one export.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub config: PathBuf,
    pub report: PathBuf,
    pub metadata: PathBuf,
    pub traces: Vec<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes everything into `dir`. All files except `metadata.json` depend
/// only on the inputs.
pub fn export_results(
    cfg: &ExperimentConfig,
    traces: &[EpisodeTrace],
    reports: &[MetricsReport],
    dir: &Path,
) -> Result<ExportSummary, HarnessError> {
    if traces.len() != reports.len() {
        return Err(HarnessError::Runtime(format!(
            "{} traces but {} reports",
            traces.len(),
            reports.len()
        )));
    }
    fs::create_dir_all(dir).map_err(io(dir))?;
    let config = dir.join("config.yaml");
    fs::write(&config, dump_config(cfg)).map_err(io(&config))?;

    let mut paths = Vec::new();
    for trace in traces {
        let path = dir.join(trace_file_name(trace));
        let mut buf = Vec::new();
        write_trace_csv(trace, &mut buf).map_err(io(&path))?;
        fs::write(&path, buf).map_err(io(&path))?;
        paths.push(path);
    }

    let report = Report {
        name: &cfg.name,
        system: cfg.system.id().name(),
        seeds: &cfg.seeds,
        aggregate: aggregate(reports),
        episodes: traces
            .iter()
            .zip(reports)
            .map(|(t, metrics)| EpisodeEntry {
                seed: t.seed,
                episode: t.episode,
                trace_file: trace_file_name(t),
                failed: t.failed,
                terminated: t.terminated,
                error: &t.error,
                metrics,
            })
            .collect(),
    };
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n").map_err(io(&report_path))?;

    let metadata = Metadata {
        created_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        episode_wall_seconds: traces.iter().map(|t| t.wall_seconds).collect(),
    };
    let metadata_path = dir.join("metadata.json");
    fs::write(&metadata_path, serde_json::to_string_pretty(&metadata)? + "\n").map_err(io(&metadata_path))?;

    Ok(ExportSummary {
        config,
        report: report_path,
        metadata: metadata_path,
        traces: paths,
    })
}
