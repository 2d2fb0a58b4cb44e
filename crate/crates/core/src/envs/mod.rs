//! Episodic environments wrapping the closed-form models.
//!
//! One control step applies the action disturbance, clips to the input
//! bounds, holds the result over `physics_hz / control_hz` RK4 substeps,
//! then evaluates reward and constraints on the new true state. The observation
//! handed back is the true state plus any observation disturbance.

mod task;

pub use task::{
    generate_trajectory, quadratic_cost, RewardKind, TaskKind, TaskSpec, TrajectoryShape, TrajectorySpec,
    DEFAULT_THETA_MAX, SQUARE_CORNER_FRACTION,
};

use nalgebra::DVector;
use thiserror::Error;

use crate::constraints::{is_violation, ConstraintError, ConstraintSet};
use crate::disturbances::{DisturbanceError, DisturbancePlan, DisturbanceTarget, RandomizationSpec, SeedPlan};
use crate::dynamics::{DynamicsError, DynamicsModel, Params, SystemId};

pub const DEFAULT_PHYSICS_HZ: u32 = 1000;
pub const DEFAULT_CONTROL_HZ: u32 = 50;
pub const DEFAULT_EPISODE_STEPS: usize = 250;
/// Cart-pole force limit (N).
pub const CARTPOLE_FORCE_LIMIT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode ended")]
    EpisodeOver,
    #[error("step called before reset")]
    NotReset,
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory shape {shape:?} is not supported for {system:?}")]
    UnsupportedShape { shape: TrajectoryShape, system: SystemId },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
}

/// Elementwise input limits.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBounds {
    /// `|F| ≤ 10 N` for the cart-pole; per-motor thrust in `[0, 2mg / n_u]`
    /// for the quadrotors, i.e. at most twice hover thrust in total.
    pub fn default_for(params: &Params) -> Self {
        match params {
            Params::CartPole(_) => Self {
                lower: DVector::from_element(1, -CARTPOLE_FORCE_LIMIT),
                upper: DVector::from_element(1, CARTPOLE_FORCE_LIMIT),
            },
            Params::Quad1D(p) => Self {
                lower: DVector::zeros(1),
                upper: DVector::from_element(1, 2.0 * p.m * p.g),
            },
            Params::Quad2D(p) => Self {
                lower: DVector::zeros(2),
                upper: DVector::from_element(2, p.m * p.g),
            },
        }
    }

    pub fn clip(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
        )
    }

    /// Clips a stack of inputs laid out one after another.
    pub fn clip_stacked(&self, u: &DVector<f64>) -> DVector<f64> {
        let m = self.lower.len().max(1);
        DVector::from_iterator(
            u.len(),
            u.iter()
                .enumerate()
                .map(|(i, &v)| v.clamp(self.lower[i % m], self.upper[i % m])),
        )
    }
}

/// Everything needed to build an environment; seeds arrive at reset.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Nominal true parameters, before randomization.
    pub params: Params,
    pub task: TaskSpec,
    pub x0: DVector<f64>,
    pub constraints: ConstraintSet,
    pub disturbances: DisturbancePlan,
    pub randomization: RandomizationSpec,
    pub input_bounds: InputBounds,
    pub physics_hz: u32,
    pub control_hz: u32,
    /// End the episode once the cart-pole angle leaves `[−θ_max, θ_max]`.
    pub terminate_on_angle: bool,
    /// Attach the next tracking reference to every step result.
    pub expose_reference: bool,
}

impl EnvConfig {
    /// Defaults for `system` with the given task.
    pub fn new(params: Params, task: TaskSpec, x0: DVector<f64>) -> Self {
        let system = params.system_id();
        Self {
            input_bounds: InputBounds::default_for(&params),
            params,
            task,
            x0,
            constraints: ConstraintSet::empty(system.n_x(), system.n_u()),
            disturbances: DisturbancePlan::default(),
            randomization: RandomizationSpec::default(),
            physics_hz: DEFAULT_PHYSICS_HZ,
            control_hz: DEFAULT_CONTROL_HZ,
            terminate_on_angle: system == SystemId::CartPole,
            expose_reference: false,
        }
    }

    pub fn system_id(&self) -> SystemId {
        self.params.system_id()
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_hz as f64
    }

    pub fn substeps(&self) -> usize {
        (self.physics_hz / self.control_hz) as usize
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let system = self.system_id();
        let (n_x, n_u) = (system.n_x(), system.n_u());
        self.params.validate()?;
        self.task.validate(n_x, n_u)?;
        if self.x0.len() != n_x {
            return Err(EnvError::InvalidConfig(format!("initial state has length {}", self.x0.len())));
        }
        if self.constraints.n_x() != n_x || self.constraints.n_u() != n_u {
            return Err(EnvError::InvalidConfig("constraint set dimensions".into()));
        }
        if self.control_hz == 0 || self.physics_hz == 0 || !self.physics_hz.is_multiple_of(self.control_hz) {
            return Err(EnvError::InvalidConfig(format!(
                "physics rate {} Hz must be a positive multiple of control rate {} Hz",
                self.physics_hz, self.control_hz
            )));
        }
        let b = &self.input_bounds;
        if b.lower.len() != n_u || b.upper.len() != n_u || b.lower.iter().zip(b.upper.iter()).any(|(l, u)| l > u) {
            return Err(EnvError::InvalidConfig("input bounds".into()));
        }
        let dof = system.accel_indices().len();
        for spec in &self.disturbances.specs {
            let len = match spec.target {
                DisturbanceTarget::Action => n_u,
                DisturbanceTarget::Observation => n_x,
                DisturbanceTarget::Dynamics => dof,
            };
            spec.validate(len, self.task.steps)?;
        }
        if self.disturbances.force_schedule.iter().any(|f| f.len() != dof) {
            return Err(EnvError::InvalidConfig("force schedule entry length".into()));
        }
        self.randomization.validate(n_x, &self.params)?;
        Ok(())
    }
}

/// Disclosed to the controller at reset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetInfo {
    /// Nominal model scaled by the configured prior factor.
    pub prior_model: DynamicsModel,
    pub x0: DVector<f64>,
    pub task: TaskSpec,
    pub constraints: ConstraintSet,
    pub input_bounds: InputBounds,
    pub control_dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Index of the state reached by this step.
    pub step: usize,
    pub true_state: DVector<f64>,
    /// Input after the action disturbance, before clipping.
    pub u_disturbed: DVector<f64>,
    pub u_applied: DVector<f64>,
    pub constraint_values: DVector<f64>,
    pub violation: bool,
    /// The integrator produced a non-finite state.
    pub failed: bool,
    /// The termination condition fired before the last step.
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: DVector<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
    pub reference: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct EpisodeState {
    model: DynamicsModel,
    x: DVector<f64>,
    step: usize,
    episode: u64,
    seeds: SeedPlan,
    done: bool,
}

/// Single-owner environment instance.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    state: Option<EpisodeState>,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        Ok(Self { cfg, state: None })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// True model of the current episode.
    pub fn true_model(&self) -> Option<&DynamicsModel> {
        self.state.as_ref().map(|s| &s.model)
    }

    pub fn true_state(&self) -> Option<&DVector<f64>> {
        self.state.as_ref().map(|s| &s.x)
    }

    pub fn prior_model(&self) -> Result<DynamicsModel, EnvError> {
        Ok(DynamicsModel::new(self.cfg.params)?.scaled(self.cfg.randomization.prior_scaling)?)
    }

    pub fn reset(&mut self, seed: u64, episode: u64) -> Result<(DVector<f64>, ResetInfo), EnvError> {
        let seeds = SeedPlan::new(seed);
        let params = self.cfg.randomization.sample_params(&self.cfg.params, &seeds, episode)?;
        let model = DynamicsModel::new(params)?;
        let x0 = self.cfg.randomization.sample_initial_state(&self.cfg.x0, &seeds, episode);
        let obs = self
            .cfg
            .disturbances
            .apply(DisturbanceTarget::Observation, &x0, &seeds, episode, 0);
        let info = ResetInfo {
            prior_model: self.prior_model()?,
            x0: x0.clone(),
            task: self.cfg.task.clone(),
            constraints: self.cfg.constraints.clone(),
            input_bounds: self.cfg.input_bounds.clone(),
            control_dt: self.cfg.control_dt(),
        };
        self.state = Some(EpisodeState {
            model,
            x: x0,
            step: 0,
            episode,
            seeds,
            done: false,
        });
        Ok((obs, info))
    }

    pub fn step(&mut self, u: &DVector<f64>) -> Result<StepResult, EnvError> {
        let cfg = &self.cfg;
        let st = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if st.done {
            return Err(EnvError::EpisodeOver);
        }
        let system = cfg.system_id();
        if u.len() != system.n_u() {
            return Err(EnvError::DimensionMismatch(format!(
                "input has length {}, expected {}",
                u.len(),
                system.n_u()
            )));
        }
        let i = st.step;
        let u_disturbed = cfg
            .disturbances
            .apply(DisturbanceTarget::Action, u, &st.seeds, st.episode, i);
        let u_applied = cfg.input_bounds.clip(&u_disturbed);
        let force = cfg
            .disturbances
            .dynamics_force(system.accel_indices().len(), &st.seeds, st.episode, i);
        let h = 1.0 / cfg.physics_hz as f64;
        let mut x = st.x.clone();
        let mut failed = false;
        for _ in 0..cfg.substeps() {
            match st.model.rk4_step(&x, &u_applied, h, force.as_ref()) {
                Ok(next) => x = next,
                Err(DynamicsError::NonFiniteState) => {
                    failed = true;
                    x = x.map(|_| f64::NAN);
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        let x_prev = std::mem::replace(&mut st.x, x);
        st.step += 1;
        let k = st.step;

        let constraint_values = cfg.constraints.evaluate(&st.x, &u_applied)?;
        let violation = failed || is_violation(&constraint_values);
        let out_of_angle = system == SystemId::CartPole && !failed && st.x[2].abs() > cfg.task.theta_max;
        let terminated = failed || (cfg.terminate_on_angle && out_of_angle && k < cfg.task.steps);
        let done = terminated || k >= cfg.task.steps || (cfg.terminate_on_angle && out_of_angle);
        let reward = match cfg.task.reward {
            RewardKind::Sparse => 1.0,
            RewardKind::Quadratic => {
                let mut cost = cfg.task.state_cost(i, &x_prev) + cfg.task.input_cost(i, &u_applied);
                if done {
                    cost += cfg.task.state_cost(k, &st.x);
                }
                -cost
            }
        };
        st.done = done;
        let obs = cfg
            .disturbances
            .apply(DisturbanceTarget::Observation, &st.x, &st.seeds, st.episode, k);
        Ok(StepResult {
            obs,
            reward,
            done,
            reference: cfg.expose_reference.then(|| cfg.task.x_ref_at(k).clone()),
            info: StepInfo {
                step: k,
                true_state: st.x.clone(),
                u_disturbed,
                u_applied,
                constraint_values,
                violation,
                failed,
                terminated,
            },
        })
    }
}

/// Stabilization task holding `goal` with the equilibrium input.
pub fn stabilization_task(
    model: &DynamicsModel,
    goal: DVector<f64>,
    q: nalgebra::DMatrix<f64>,
    r: nalgebra::DMatrix<f64>,
    steps: usize,
) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Stabilization,
        reward: RewardKind::Quadratic,
        x_ref: vec![goal; steps + 1],
        u_ref: vec![model.equilibrium_input(); steps],
        q,
        r,
        steps,
        theta_max: DEFAULT_THETA_MAX,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn quad1d_env(steps: usize) -> Env {
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let goal = DVector::from_vec(vec![1.0, 0.0]);
        let task = stabilization_task(&model, goal.clone(), DMatrix::identity(2, 2), DMatrix::identity(1, 1), steps);
        Env::new(EnvConfig::new(*model.params(), task, goal)).unwrap()
    }

    fn sparse_cartpole(steps: usize, x0: DVector<f64>) -> Env {
        let model = DynamicsModel::default_for(SystemId::CartPole);
        let mut task = stabilization_task(&model, DVector::zeros(4), DMatrix::identity(4, 4), DMatrix::identity(1, 1), steps);
        task.reward = RewardKind::Sparse;
        Env::new(EnvConfig::new(*model.params(), task, x0)).unwrap()
    }

    #[test]
    fn hover_at_reference_is_free() {
        let mut env = quad1d_env(20);
        let (obs, info) = env.reset(0, 0).unwrap();
        let u = info.prior_model.equilibrium_input();
        assert_eq!(obs, info.task.x_ref[0]);
        for _ in 0..20 {
            let r = env.step(&u).unwrap();
            assert_eq!(r.reward, 0.0);
            assert_eq!(r.obs, info.task.x_ref[0]);
        }
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = quad1d_env(2);
        let (_, info) = env.reset(0, 0).unwrap();
        let u = info.prior_model.equilibrium_input();
        assert!(!env.step(&u).unwrap().done);
        assert!(env.step(&u).unwrap().done);
        assert_eq!(env.step(&u), Err(EnvError::EpisodeOver));
    }

    #[test]
    fn sparse_reward_full_episode() {
        let mut env = sparse_cartpole(30, DVector::zeros(4));
        env.reset(0, 0).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        loop {
            let r = env.step(&DVector::zeros(1)).unwrap();
            total += r.reward;
            n += 1;
            if r.done {
                break;
            }
        }
        assert_eq!(n, 30);
        assert_eq!(total, 30.0);
    }

    #[test]
    fn sparse_reward_stops_when_pole_falls() {
        let mut env = sparse_cartpole(500, DVector::from_vec(vec![0.0, 0.0, 0.15, 0.0]));
        env.reset(0, 0).unwrap();
        let mut total = 0.0;
        let last = loop {
            let r = env.step(&DVector::zeros(1)).unwrap();
            total += r.reward;
            if r.done {
                break r;
            }
        };
        assert!(last.info.terminated);
        assert!(last.info.true_state[2].abs() > DEFAULT_THETA_MAX);
        assert!(last.info.step < 500);
        assert_eq!(total, last.info.step as f64);
    }

    #[test]
    fn inputs_are_clipped() {
        let mut env = quad1d_env(5);
        env.reset(0, 0).unwrap();
        let r = env.step(&DVector::from_element(1, 100.0)).unwrap();
        assert!((r.info.u_applied[0] - 2.0 * 0.027 * 9.8).abs() < 1e-15);
        assert_eq!(r.info.u_disturbed[0], 100.0);
    }

    #[test]
    fn rejects_non_integer_substeps() {
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let task = stabilization_task(&model, DVector::zeros(2), DMatrix::identity(2, 2), DMatrix::identity(1, 1), 3);
        let mut cfg = EnvConfig::new(*model.params(), task, DVector::zeros(2));
        cfg.control_hz = 30;
        assert!(matches!(Env::new(cfg), Err(EnvError::InvalidConfig(_))));
    }
}
