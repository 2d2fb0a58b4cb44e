//! The environment/controller loop and GP data collection.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;

use safectl_core::controllers::{Controller, MpcMode};
use safectl_core::disturbances::{SeedPlan, Stream};
use safectl_core::dynamics::SystemId;
use safectl_core::envs::Env;
use safectl_core::safefilters::{residual_target, GpModel, GpMpcController, GpSettings, SafetyFilter, TransitionBuffer};

use crate::build::{build_controller, build_filter, build_mpc, env_config, BuildContext};
use crate::config::{ControllerKind, ExperimentConfig};
use crate::HarnessError;

/// Episode indices used for GP data collection start here, far from
/// evaluation episodes so the two never share random draws.
pub const TRAINING_EPISODE_BASE: u64 = 1 << 40;
/// Stream for exploration noise during data collection; above any
/// disturbance-spec index a config can reach.
const EXPLORATION_STREAM: Stream = Stream::Disturbance(1 << 20);

/// Everything that happened in one episode. States, observations and
/// references have one more entry than the per-step vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub episode: u64,
    pub system: SystemId,
    pub dt: f64,
    pub task_steps: usize,
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub references: Vec<DVector<f64>>,
    pub proposed: Vec<DVector<f64>>,
    pub disturbed: Vec<DVector<f64>>,
    pub applied: Vec<DVector<f64>>,
    pub rewards: Vec<f64>,
    pub constraint_values: Vec<DVector<f64>>,
    pub violations: Vec<bool>,
    pub filter_modified: Vec<bool>,
    pub has_filter: bool,
    pub failed: bool,
    pub terminated: bool,
    /// Controller, filter or environment error that stopped the episode.
    pub error: Option<String>,
    /// Excluded from every exported byte except run metadata.
    pub wall_seconds: f64,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.applied.len()
    }

    /// Ran every task step without failure, termination or error.
    pub fn completed(&self) -> bool {
        self.error.is_none() && !self.failed && !self.terminated && self.steps() == self.task_steps
    }
}

/// One observed transition, as seen by the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

fn controller_for(cfg: &ExperimentConfig, ctx: &BuildContext, seed: u64) -> Result<Box<dyn Controller>, HarnessError> {
    if cfg.controller.kind != ControllerKind::Gpmpc {
        return build_controller(cfg, ctx);
    }
    let gp = train_gp(cfg, ctx, seed)?;
    let mpc = build_mpc(cfg, ctx, MpcMode::Nonlinear)?;
    Ok(Box::new(GpMpcController::new(mpc, gp, cfg.controller.z_score)?))
}

/// Runs the uncorrected prior NMPC for the configured number of training
/// episodes and records the observed transitions.
pub fn collect_transitions(cfg: &ExperimentConfig, seed: u64, episodes: usize) -> Result<Vec<Transition>, HarnessError> {
    let env_cfg = env_config(cfg)?;
    let explore = SeedPlan::new(seed);
    let std = cfg.controller.gp.exploration_std;
    let mut out = Vec::new();
    for j in 0..episodes as u64 {
        let episode = TRAINING_EPISODE_BASE + j;
        let mut env = Env::new(env_cfg.clone())?;
        let (mut obs, info) = env.reset(seed, episode)?;
        let ctx = BuildContext::from_reset(&info);
        let mut ctrl = build_mpc(cfg, &ctx, MpcMode::Nonlinear)?;
        for step in 0..ctx.task.steps {
            let mut u = ctrl.act(&obs, step)?;
            if std > 0.0 {
                for (c, v) in u.iter_mut().enumerate() {
                    *v += std * explore.normal(episode, step as u64, EXPLORATION_STREAM, c as u64, 0);
                }
            }
            let r = env.step(&u)?;
            if r.info.failed {
                break;
            }
            out.push(Transition {
                x: obs,
                u: r.info.u_applied.clone(),
                x_next: r.obs.clone(),
            });
            obs = r.obs;
            if r.done {
                break;
            }
        }
    }
    Ok(out)
}

/// Fits the residual GP on the most recent transitions of the training episodes.
pub fn train_gp(cfg: &ExperimentConfig, ctx: &BuildContext, seed: u64) -> Result<GpModel, HarnessError> {
    let gp_cfg = &cfg.controller.gp;
    let data = collect_transitions(cfg, seed, gp_cfg.train_episodes)?;
    let mut buffer = TransitionBuffer::new(gp_cfg.reservoir);
    for t in &data {
        let (z, r) = residual_target(&ctx.prior, ctx.dt, cfg.controller.substeps, &t.x, &t.u, &t.x_next)?;
        buffer.push(z, r);
    }
    let settings = GpSettings {
        optimize: gp_cfg.optimize,
        ..GpSettings::default()
    };
    if buffer.len() < 2 {
        let (n, m) = (ctx.prior.n_x(), ctx.prior.n_u());
        return Ok(GpModel::empty(n + m, n));
    }
    Ok(buffer.fit(&settings)?)
}

/// Runs one episode. Configuration problems are errors; anything that goes
/// wrong while the episode runs is recorded in the trace.
pub fn run_episode(cfg: &ExperimentConfig, seed: u64, episode: u64) -> Result<EpisodeTrace, HarnessError> {
    Ok(simulate(cfg, seed, episode, true)?.0)
}

/// Runs one episode and also returns the number of executed steps, which
/// is the only output left when `record` is off.
pub(crate) fn simulate(
    cfg: &ExperimentConfig,
    seed: u64,
    episode: u64,
    record: bool,
) -> Result<(EpisodeTrace, usize), HarnessError> {
    let env_cfg = env_config(cfg)?;
    let start = Instant::now();
    let mut env = Env::new(env_cfg)?;
    let (obs, info) = env.reset(seed, episode)?;
    let ctx = BuildContext::from_reset(&info);
    let cap = if record { ctx.task.steps } else { 0 };
    let mut trace = EpisodeTrace {
        seed,
        episode,
        system: cfg.system.id(),
        dt: ctx.dt,
        task_steps: ctx.task.steps,
        states: vec![info.x0.clone()],
        observations: vec![obs.clone()],
        references: vec![ctx.task.x_ref_at(0).clone()],
        proposed: Vec::with_capacity(cap),
        disturbed: Vec::with_capacity(cap),
        applied: Vec::with_capacity(cap),
        rewards: Vec::with_capacity(cap),
        constraint_values: Vec::with_capacity(cap),
        violations: Vec::with_capacity(cap),
        filter_modified: Vec::with_capacity(cap),
        has_filter: false,
        failed: false,
        terminated: false,
        error: None,
        wall_seconds: 0.0,
    };
    let built = controller_for(cfg, &ctx, seed).and_then(|c| Ok((c, build_filter(cfg, &ctx)?)));
    let (mut controller, mut filter): (Box<dyn Controller>, Option<Box<dyn SafetyFilter>>) = match built {
        Ok(pair) => pair,
        Err(e) => {
            trace.error = Some(e.to_string());
            trace.wall_seconds = start.elapsed().as_secs_f64();
            return Ok((trace, 0));
        }
    };
    trace.has_filter = filter.is_some();
    let mut obs = obs;
    let mut executed = 0usize;
    for step in 0..ctx.task.steps {
        let proposed = match controller.act(&obs, step) {
            Ok(u) => u,
            Err(e) => {
                trace.error = Some(format!("controller at step {step}: {e}"));
                break;
            }
        };
        let (u, modified) = match filter.as_mut() {
            Some(f) => match f.filter(&obs, &proposed, step) {
                Ok(out) => (out.u_safe, out.modified),
                Err(e) => {
                    trace.error = Some(format!("filter at step {step}: {e}"));
                    break;
                }
            },
            None => (proposed.clone(), false),
        };
        let r = match env.step(&u) {
            Ok(r) => r,
            Err(e) => {
                trace.error = Some(format!("environment at step {step}: {e}"));
                break;
            }
        };
        executed += 1;
        trace.failed |= r.info.failed;
        trace.terminated |= r.info.terminated;
        if record {
            trace.states.push(r.info.true_state);
            trace.observations.push(r.obs.clone());
            trace.references.push(ctx.task.x_ref_at(step + 1).clone());
            trace.proposed.push(proposed);
            trace.disturbed.push(r.info.u_disturbed);
            trace.applied.push(r.info.u_applied);
            trace.rewards.push(r.reward);
            trace.constraint_values.push(r.info.constraint_values);
            trace.violations.push(r.info.violation);
            trace.filter_modified.push(modified);
        }
        obs = r.obs;
        if r.done {
            break;
        }
    }
    trace.wall_seconds = start.elapsed().as_secs_f64();
    Ok((trace, executed))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    builder.build().map_err(|e| HarnessError::Runtime(e.to_string()))
}

/// Runs `jobs` on a pool of `workers` threads; results keep the job order.
pub fn run_jobs(cfg_jobs: &[(ExperimentConfig, u64, u64)], workers: Option<usize>) -> Result<Vec<EpisodeTrace>, HarnessError> {
    pool(workers)?.install(|| {
        cfg_jobs
            .par_iter()
            .map(|(cfg, seed, ep)| run_episode(cfg, *seed, *ep))
            .collect()
    })
}

/// Every (seed, episode) pair of the config, ordered by seed then episode.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let jobs: Vec<_> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.episodes as u64).map(move |e| (cfg.clone(), s, e)))
        .collect();
    run_jobs(&jobs, workers)
}
