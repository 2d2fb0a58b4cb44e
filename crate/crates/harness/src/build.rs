//! Turns a validated [`ExperimentConfig`] into core objects.

use nalgebra::{DMatrix, DVector};

use safectl_core::constraints::{ConstraintForm, ConstraintSet, ConstraintSpec, ConstraintTarget};
use safectl_core::controllers::{
    lqr_synthesize, ConstantInput, Controller, IlqrController, IlqrSettings, LqrMode, MpcConfig, MpcController,
    MpcMode, PidController, PidGains,
};
use safectl_core::disturbances::{
    DisturbanceKind, DisturbancePlan, DisturbanceSpec, DisturbanceTarget, Distribution, RandomizationSpec,
};
use safectl_core::dynamics::{DynamicsModel, Params, SystemId};
use safectl_core::envs::{
    generate_trajectory, stabilization_task, Env, EnvConfig, InputBounds, RewardKind, TaskKind, TrajectoryShape,
    TrajectorySpec,
};
use safectl_core::safefilters::{CbfFilter, CbfSpec, MpscConfig, MpscFilter, SafetyFilter};

use crate::config::*;
use crate::HarnessError;

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::schema(path, message)
}

fn expect_len(path: &str, v: &[f64], len: usize) -> Result<(), ConfigError> {
    if v.len() != len {
        return Err(schema(path, format!("expected {len} entries, got {}", v.len())));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(schema(path, "NaN entry"));
    }
    Ok(())
}

fn matrix(path: &str, rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>, ConfigError> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err(schema(path, format!("expected rows of {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn distribution(path: &str, d: &DistributionConfig) -> Result<Distribution, ConfigError> {
    let need = |v: Option<f64>, field: &str| v.ok_or_else(|| schema(format!("{path}.{field}"), "required"));
    Ok(match d.kind {
        DistributionName::None => Distribution::None,
        DistributionName::Uniform => Distribution::Uniform {
            lo: need(d.lo, "lo")?,
            hi: need(d.hi, "hi")?,
        },
        DistributionName::Gaussian => Distribution::Gaussian {
            mean: d.mean.unwrap_or(0.0),
            std: need(d.std, "std")?,
        },
        DistributionName::Constant => Distribution::Constant {
            value: need(d.value, "value")?,
        },
    })
}

/// True parameters: defaults with the configured overrides.
pub fn true_params(cfg: &ExperimentConfig) -> Result<Params, ConfigError> {
    let mut params = Params::default_for(cfg.system.id());
    for (name, &value) in &cfg.params {
        params = params
            .with(name, value)
            .ok_or_else(|| schema(format!("params.{name}"), format!("unknown parameter for {:?}", cfg.system)))?;
    }
    params
        .validate()
        .map_err(|e| schema("params", e.to_string()))?;
    Ok(params)
}

fn constraint_set(cfg: &ExperimentConfig) -> Result<ConstraintSet, ConfigError> {
    let system = cfg.system.id();
    let mut specs = Vec::new();
    for (i, c) in cfg.constraints.iter().enumerate() {
        let path = format!("constraints[{i}]");
        let k = c.channels.len();
        let bound = |v: &Option<Vec<f64>>, field: &str| -> Result<Option<Vec<f64>>, ConfigError> {
            if let Some(v) = v {
                expect_len(&format!("{path}.{field}"), v, k)?;
            }
            Ok(v.clone())
        };
        let target = || match c.target {
            Some(ConstraintTargetName::State) | None => ConstraintTarget::State,
            Some(ConstraintTargetName::Input) => ConstraintTarget::Input,
            Some(ConstraintTargetName::Both) => ConstraintTarget::Both,
        };
        let spec = match c.kind {
            ConstraintKind::StateBound => ConstraintSpec::state_bound(c.channels.clone(), bound(&c.lower, "lower")?, bound(&c.upper, "upper")?),
            ConstraintKind::InputBound => ConstraintSpec::input_bound(c.channels.clone(), bound(&c.lower, "lower")?, bound(&c.upper, "upper")?),
            ConstraintKind::Linear => {
                let a = c.a.as_ref().ok_or_else(|| schema(format!("{path}.a"), "required"))?;
                let b = c.b.as_ref().ok_or_else(|| schema(format!("{path}.b"), "required"))?;
                let a = matrix(&format!("{path}.a"), a, k)?;
                expect_len(&format!("{path}.b"), b, a.nrows())?;
                ConstraintSpec::new(
                    ConstraintForm::Linear {
                        a,
                        b: DVector::from_column_slice(b),
                    },
                    target(),
                    c.channels.clone(),
                )
            }
            ConstraintKind::Quadratic => {
                let p = c.p.as_ref().ok_or_else(|| schema(format!("{path}.p"), "required"))?;
                let r = c.r.ok_or_else(|| schema(format!("{path}.r"), "required"))?;
                let p = matrix(&format!("{path}.p"), p, k)?;
                ConstraintSpec::new(ConstraintForm::Quadratic { p, r }, target(), c.channels.clone())
            }
        };
        // Validate each spec alone so errors carry its index.
        ConstraintSet::new(vec![spec.clone()], system.n_x(), system.n_u()).map_err(|e| schema(&path, e.to_string()))?;
        specs.push(spec);
    }
    ConstraintSet::new(specs, system.n_x(), system.n_u()).map_err(|e| schema("constraints", e.to_string()))
}

fn disturbance_plan(cfg: &ExperimentConfig) -> Result<DisturbancePlan, ConfigError> {
    let mut specs = Vec::new();
    for (i, d) in cfg.disturbances.iter().enumerate() {
        let path = format!("disturbances[{i}]");
        let k = d.channels.len();
        let values = |v: &Option<Vec<f64>>, field: &str| -> Result<Vec<f64>, ConfigError> {
            let v = v.as_ref().ok_or_else(|| schema(format!("{path}.{field}"), "required"))?;
            expect_len(&format!("{path}.{field}"), v, k)?;
            Ok(v.clone())
        };
        let at = || d.at.ok_or_else(|| schema(format!("{path}.at"), "required"));
        let kind = match d.kind {
            DisturbanceKindName::WhiteNoise => DisturbanceKind::WhiteNoise { std: values(&d.std, "std")? },
            DisturbanceKindName::Step => DisturbanceKind::Step {
                magnitude: values(&d.magnitude, "magnitude")?,
                onset: at()?,
            },
            DisturbanceKindName::Impulse => DisturbanceKind::Impulse {
                magnitude: values(&d.magnitude, "magnitude")?,
                step: at()?,
            },
        };
        let target = match d.target {
            DisturbanceTargetName::Action => DisturbanceTarget::Action,
            DisturbanceTargetName::Observation => DisturbanceTarget::Observation,
            DisturbanceTargetName::Dynamics => DisturbanceTarget::Dynamics,
        };
        specs.push(DisturbanceSpec {
            target,
            kind,
            channels: d.channels.clone(),
        });
    }
    if cfg.action_noise_std < 0.0 || cfg.action_noise_std.is_nan() {
        return Err(schema("action_noise_std", "must be non-negative"));
    }
    if cfg.action_noise_std > 0.0 {
        let m = cfg.system.id().n_u();
        specs.push(DisturbanceSpec {
            target: DisturbanceTarget::Action,
            kind: DisturbanceKind::WhiteNoise {
                std: vec![cfg.action_noise_std; m],
            },
            channels: (0..m).collect(),
        });
    }
    Ok(DisturbancePlan::new(specs))
}

/// The environment configuration the experiment runs in.
pub fn env_config(cfg: &ExperimentConfig) -> Result<EnvConfig, ConfigError> {
    let system = cfg.system.id();
    let (n, m) = (system.n_x(), system.n_u());
    let params = true_params(cfg)?;
    let model = DynamicsModel::new(params).map_err(|e| schema("params", e.to_string()))?;
    if cfg.control_hz == 0 || cfg.physics_hz == 0 || !cfg.physics_hz.is_multiple_of(cfg.control_hz) {
        return Err(schema("control_hz", "physics_hz must be a positive multiple of control_hz"));
    }
    let dt = 1.0 / cfg.control_hz as f64;
    let t = &cfg.task;
    if t.steps == 0 {
        return Err(schema("task.steps", "must be positive"));
    }
    let q = t.q.clone().unwrap_or_else(|| vec![1.0; n]);
    expect_len("task.q", &q, n)?;
    let r = t.r.clone().unwrap_or_else(|| vec![0.1; m]);
    expect_len("task.r", &r, m)?;
    let (q, r) = (
        DMatrix::from_diagonal(&DVector::from_vec(q)),
        DMatrix::from_diagonal(&DVector::from_vec(r)),
    );
    let mut task = match t.kind {
        TaskKindName::Stabilization => {
            let goal = t.goal.clone().unwrap_or_else(|| vec![0.0; n]);
            expect_len("task.goal", &goal, n)?;
            stabilization_task(&model, DVector::from_vec(goal), q, r, t.steps)
        }
        TaskKindName::Tracking => {
            let traj = t
                .trajectory
                .as_ref()
                .ok_or_else(|| schema("task.trajectory", "required for tracking"))?;
            let spec = TrajectorySpec {
                shape: match traj.shape {
                    ShapeName::Circle => TrajectoryShape::Circle,
                    ShapeName::Sine => TrajectoryShape::Sine,
                    ShapeName::Lemniscate => TrajectoryShape::Lemniscate,
                    ShapeName::Square => TrajectoryShape::Square,
                },
                scale: traj.scale,
                period: traj.period,
                center: (traj.center[0], traj.center[1]),
            };
            let (x_ref, u_ref) = generate_trajectory(&spec, system, t.steps, dt, &model.equilibrium_input())
                .map_err(|e| schema("task.trajectory", e.to_string()))?;
            let mut task = stabilization_task(&model, x_ref[0].clone(), q, r, t.steps);
            task.kind = TaskKind::Tracking;
            task.x_ref = x_ref;
            task.u_ref = u_ref;
            task
        }
    };
    task.reward = match t.reward {
        RewardName::Quadratic => RewardKind::Quadratic,
        RewardName::Sparse => RewardKind::Sparse,
    };
    task.theta_max = t.theta_max;
    let x0 = match &t.x0 {
        Some(x0) => {
            expect_len("task.x0", x0, n)?;
            DVector::from_column_slice(x0)
        }
        None => task.x_ref[0].clone(),
    };

    let mut env = EnvConfig::new(params, task, x0);
    env.physics_hz = cfg.physics_hz;
    env.control_hz = cfg.control_hz;
    if let Some(flag) = t.terminate_on_angle {
        env.terminate_on_angle = flag;
    }
    env.constraints = constraint_set(cfg)?;
    env.disturbances = disturbance_plan(cfg)?;
    let x0_dists = cfg
        .randomization
        .x0
        .iter()
        .enumerate()
        .map(|(i, d)| distribution(&format!("randomization.x0[{i}]"), d))
        .collect::<Result<Vec<_>, _>>()?;
    let param_dists = cfg
        .randomization
        .params
        .iter()
        .map(|(k, d)| Ok((k.clone(), distribution(&format!("randomization.params.{k}"), d)?)))
        .collect::<Result<_, ConfigError>>()?;
    if !(cfg.prior_scale > 0.0) || !cfg.prior_scale.is_finite() {
        return Err(schema("prior_scale", "must be positive"));
    }
    env.randomization = RandomizationSpec {
        x0: x0_dists,
        params: param_dists,
        prior_scaling: cfg.prior_scale,
    };
    if let Some(b) = &cfg.input_bounds {
        expect_len("input_bounds.lower", &b.lower, m)?;
        expect_len("input_bounds.upper", &b.upper, m)?;
        env.input_bounds = InputBounds {
            lower: DVector::from_column_slice(&b.lower),
            upper: DVector::from_column_slice(&b.upper),
        };
    }
    env.validate().map_err(|e| schema("", e.to_string()))?;
    Ok(env)
}

/// Semantic checks beyond the YAML shape.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    if cfg.seeds.is_empty() {
        return Err(schema("seeds", "at least one seed is required"));
    }
    if cfg.episodes == 0 {
        return Err(schema("episodes", "must be positive"));
    }
    let c = &cfg.controller;
    if c.horizon == 0 || c.sqp_iterations == 0 || c.substeps == 0 {
        return Err(schema("controller", "horizon, sqp_iterations and substeps must be positive"));
    }
    if !(c.z_score >= 0.0) {
        return Err(schema("controller.z_score", "must be non-negative"));
    }
    if c.kind == ControllerKind::Gpmpc && (c.gp.train_episodes == 0 || c.gp.reservoir < 2) {
        return Err(schema("controller.gp", "need a training episode and room for two samples"));
    }
    if c.kind == ControllerKind::Pid && cfg.system == SystemName::Cartpole {
        return Err(schema("controller.type", "pid supports the quadrotors only"));
    }
    let env_cfg = env_config(cfg)?;
    let mut env = Env::new(env_cfg).map_err(|e| schema("", e.to_string()))?;
    let (_, info) = env.reset(cfg.seeds[0], 0).map_err(|e| schema("randomization", e.to_string()))?;
    let ctx = BuildContext::from_reset(&info);
    if c.kind != ControllerKind::Gpmpc {
        build_controller(cfg, &ctx).map_err(|e| schema("controller", e.to_string()))?;
    } else {
        build_mpc(cfg, &ctx, MpcMode::Nonlinear).map_err(|e| schema("controller", e.to_string()))?;
    }
    build_filter(cfg, &ctx).map_err(|e| schema("filter", e.to_string()))?;
    Ok(())
}

/// What a controller or filter may know about the episode.
#[derive(Debug, Clone)]
pub struct BuildContext {
    pub prior: DynamicsModel,
    pub task: safectl_core::envs::TaskSpec,
    pub constraints: ConstraintSet,
    pub bounds: InputBounds,
    pub dt: f64,
}

impl BuildContext {
    pub fn from_reset(info: &safectl_core::envs::ResetInfo) -> Self {
        Self {
            prior: info.prior_model.clone(),
            task: info.task.clone(),
            constraints: info.constraints.clone(),
            bounds: info.input_bounds.clone(),
            dt: info.control_dt,
        }
    }
}

pub fn build_mpc(cfg: &ExperimentConfig, ctx: &BuildContext, mode: MpcMode) -> Result<MpcController, HarnessError> {
    let c = &cfg.controller;
    let mut mc = MpcConfig::new(mode, &ctx.task, ctx.constraints.clone(), ctx.bounds.clone());
    mc.horizon = c.horizon;
    mc.sqp_iterations = c.sqp_iterations;
    mc.warm_start = c.warm_start;
    mc.substeps = c.substeps;
    mc.backoff = c.backoff;
    Ok(MpcController::new(mc, ctx.prior.clone(), ctx.task.clone(), ctx.dt)?)
}

/// Every controller except GP-MPC, which needs training data first.
pub fn build_controller(cfg: &ExperimentConfig, ctx: &BuildContext) -> Result<Box<dyn Controller>, HarnessError> {
    let c = &cfg.controller;
    Ok(match c.kind {
        ControllerKind::Open => {
            let u = if c.zero_input {
                DVector::zeros(ctx.prior.n_u())
            } else {
                ctx.prior.equilibrium_input()
            };
            Box::new(ConstantInput(u))
        }
        ControllerKind::Lqr => {
            let mode = match c.lqr_mode {
                LqrModeName::Continuous => LqrMode::Continuous,
                LqrModeName::Discrete => LqrMode::Discrete,
            };
            Box::new(lqr_synthesize(&ctx.prior, &ctx.task, ctx.dt, mode)?)
        }
        ControllerKind::Ilqr => Box::new(IlqrController::new(
            ctx.prior.clone(),
            ctx.task.clone(),
            ctx.dt,
            IlqrSettings::default(),
        )),
        ControllerKind::Pid => Box::new(PidController::new(&ctx.prior, ctx.task.clone(), ctx.dt, PidGains::default())?),
        ControllerKind::Lmpc => Box::new(build_mpc(cfg, ctx, MpcMode::Linear)?),
        ControllerKind::Nmpc => Box::new(build_mpc(cfg, ctx, MpcMode::Nonlinear)?),
        ControllerKind::Gpmpc => {
            return Err(HarnessError::Runtime("GP-MPC is built by the episode runner".into()));
        }
    })
}

pub fn build_filter(cfg: &ExperimentConfig, ctx: &BuildContext) -> Result<Option<Box<dyn SafetyFilter>>, HarnessError> {
    let f = &cfg.filter;
    let n = ctx.prior.n_x();
    Ok(match f.kind {
        FilterKind::None => None,
        FilterKind::Cbf => {
            let k = f.channels.len();
            if k == 0 || f.channels.iter().any(|&c| c >= n) {
                return Err(schema("filter.channels", format!("need channels below {n}")).into());
            }
            let weights = f.weights.clone().unwrap_or_else(|| vec![1.0; k]);
            expect_len("filter.weights", &weights, k)?;
            let center = f.center.clone().unwrap_or_else(|| vec![0.0; k]);
            expect_len("filter.center", &center, k)?;
            let spec = CbfSpec {
                selector: f.channels.clone(),
                p: DMatrix::from_diagonal(&DVector::from_vec(weights)),
                center: DVector::from_vec(center),
                level: f.level,
                gamma: f.gamma,
                penalty: f.penalty,
            };
            Some(Box::new(CbfFilter::new(spec, ctx.prior.clone(), ctx.bounds.clone())?))
        }
        FilterKind::Mpsc => {
            let mut mc = MpscConfig::new(ctx.constraints.clone(), ctx.bounds.clone());
            mc.horizon = f.horizon;
            mc.terminal_half_width = f.terminal_half_width;
            Some(Box::new(MpscFilter::new(mc, &ctx.prior, &ctx.task, ctx.dt)?))
        }
    })
}

/// Position channels scored by the tracking RMSE.
pub fn position_channels(system: SystemId) -> &'static [usize] {
    match system {
        SystemId::CartPole | SystemId::Quad1D => &[0],
        SystemId::Quad2D => &[0, 2],
    }
}
