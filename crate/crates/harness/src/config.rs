//! Experiment configuration: YAML in, a fully defaulted [`ExperimentConfig`]
//! out. Unknown keys are rejected and every error names the offending field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;
use thiserror::Error;

use safectl_core::dynamics::SystemId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("YAML parse error: {0}")]
    Parse(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("bad override `{0}`: expected key.path=value")]
    Override(String),
}

impl ConfigError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Cartpole,
    Quad1d,
    Quad2d,
}

impl SystemName {
    pub fn id(self) -> SystemId {
        match self {
            SystemName::Cartpole => SystemId::CartPole,
            SystemName::Quad1d => SystemId::Quad1D,
            SystemName::Quad2d => SystemId::Quad2D,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindName {
    Stabilization,
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardName {
    Quadratic,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeName {
    Circle,
    Sine,
    Lemniscate,
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub shape: ShapeName,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    /// Horizontal and vertical center.
    #[serde(default = "default_center")]
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "default_task_kind")]
    pub kind: TaskKindName,
    #[serde(default = "default_reward")]
    pub reward: RewardName,
    /// Stabilization target; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectoryConfig>,
    /// Nominal initial state; the first reference when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Diagonal of Q; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    /// Diagonal of R; 0.1 per input when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
    /// Defaults to true for the cart-pole only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminate_on_angle: Option<bool>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: default_task_kind(),
            reward: default_reward(),
            goal: None,
            trajectory: None,
            x0: None,
            q: None,
            r: None,
            steps: default_steps(),
            theta_max: default_theta_max(),
            terminate_on_angle: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Commands the equilibrium input, or zero with `zero_input`.
    Open,
    Lqr,
    Ilqr,
    Pid,
    Lmpc,
    Nmpc,
    Gpmpc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LqrModeName {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Data-collection episodes run with the uncorrected prior before fitting.
    #[serde(default = "one_usize")]
    pub train_episodes: usize,
    #[serde(default = "default_reservoir")]
    pub reservoir: usize,
    #[serde(default = "yes")]
    pub optimize: bool,
    /// Gaussian excitation added to inputs while collecting data, per channel.
    #[serde(default)]
    pub exploration_std: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            train_episodes: 1,
            reservoir: default_reservoir(),
            optimize: true,
            exploration_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "type")]
    pub kind: ControllerKind,
    #[serde(default = "default_lqr_mode")]
    pub lqr_mode: LqrModeName,
    #[serde(default)]
    pub zero_input: bool,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_sqp")]
    pub sqp_iterations: usize,
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// RK4 substeps per control period inside MPC predictions.
    #[serde(default = "one_usize")]
    pub substeps: usize,
    #[serde(default = "default_backoff")]
    pub backoff: f64,
    #[serde(default = "default_z_score")]
    pub z_score: f64,
    #[serde(default)]
    pub gp: GpConfig,
}

impl ControllerConfig {
    pub fn of(kind: ControllerKind) -> Self {
        Self {
            kind,
            lqr_mode: default_lqr_mode(),
            zero_input: false,
            horizon: default_horizon(),
            sqp_iterations: default_sqp(),
            warm_start: true,
            substeps: 1,
            backoff: default_backoff(),
            z_score: default_z_score(),
            gp: GpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    None,
    Cbf,
    Mpsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(rename = "type", default = "default_filter_kind")]
    pub kind: FilterKind,
    /// Barrier channels; `h = level − Σ wᵢ (xᵢ − cᵢ)²`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub level: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_cbf_penalty")]
    pub penalty: f64,
    #[serde(default = "default_mpsc_horizon")]
    pub horizon: usize,
    #[serde(default = "default_terminal_half_width")]
    pub terminal_half_width: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::None,
            channels: Vec::new(),
            weights: None,
            center: None,
            level: 1.0,
            gamma: default_gamma(),
            penalty: default_cbf_penalty(),
            horizon: default_mpsc_horizon(),
            terminal_half_width: default_terminal_half_width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    StateBound,
    InputBound,
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintTargetName {
    State,
    Input,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    #[serde(rename = "type")]
    pub kind: ConstraintKind,
    /// Only for `linear` and `quadratic`; bounds imply their target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ConstraintTargetName>,
    pub channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    /// Rows of `a` in `a·v ≤ b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    /// `vᵀ p v ≤ r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceTargetName {
    Action,
    Observation,
    Dynamics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKindName {
    WhiteNoise,
    Step,
    Impulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub target: DisturbanceTargetName,
    #[serde(rename = "type")]
    pub kind: DisturbanceKindName,
    pub channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<Vec<f64>>,
    /// First step of a step disturbance, or the step of an impulse.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionName {
    None,
    Uniform,
    Gaussian,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    #[serde(rename = "type")]
    pub kind: DistributionName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl DistributionConfig {
    pub fn constant(value: f64) -> Self {
        Self {
            kind: DistributionName::Constant,
            lo: None,
            hi: None,
            mean: None,
            std: None,
            value: Some(value),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizationConfig {
    /// One offset distribution per state channel, or empty.
    #[serde(default)]
    pub x0: Vec<DistributionConfig>,
    #[serde(default)]
    pub params: BTreeMap<String, DistributionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBoundsConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub system: SystemName,
    /// True-parameter overrides by name.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Factor on the inertial parameters of the model handed to controllers.
    #[serde(default = "one")]
    pub prior_scale: f64,
    #[serde(default)]
    pub task: TaskConfig,
    pub controller: ControllerConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceConfig>,
    /// White noise on every input channel; shorthand used by sweeps.
    #[serde(default)]
    pub action_noise_std: f64,
    #[serde(default)]
    pub randomization: RandomizationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bounds: Option<InputBoundsConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Episodes per seed.
    #[serde(default = "one_usize")]
    pub episodes: usize,
    #[serde(default = "default_physics_hz")]
    pub physics_hz: u32,
    #[serde(default = "default_control_hz")]
    pub control_hz: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_period() -> f64 {
    5.0
}
fn default_center() -> [f64; 2] {
    [0.0, 1.0]
}
fn default_task_kind() -> TaskKindName {
    TaskKindName::Stabilization
}
fn default_reward() -> RewardName {
    RewardName::Quadratic
}
fn default_steps() -> usize {
    safectl_core::envs::DEFAULT_EPISODE_STEPS
}
fn default_theta_max() -> f64 {
    safectl_core::envs::DEFAULT_THETA_MAX
}
fn default_lqr_mode() -> LqrModeName {
    LqrModeName::Discrete
}
fn default_horizon() -> usize {
    safectl_core::controllers::DEFAULT_HORIZON
}
fn default_sqp() -> usize {
    safectl_core::controllers::DEFAULT_SQP_ITERATIONS
}
fn default_backoff() -> f64 {
    safectl_core::controllers::DEFAULT_BACKOFF
}
fn default_z_score() -> f64 {
    safectl_core::safefilters::DEFAULT_Z_SCORE
}
fn default_reservoir() -> usize {
    safectl_core::safefilters::DEFAULT_RESERVOIR
}
fn default_filter_kind() -> FilterKind {
    FilterKind::None
}
fn default_gamma() -> f64 {
    safectl_core::safefilters::DEFAULT_CBF_GAMMA
}
fn default_cbf_penalty() -> f64 {
    safectl_core::safefilters::DEFAULT_CBF_PENALTY
}
fn default_mpsc_horizon() -> usize {
    safectl_core::safefilters::DEFAULT_MPSC_HORIZON
}
fn default_terminal_half_width() -> f64 {
    safectl_core::safefilters::DEFAULT_TERMINAL_HALF_WIDTH
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_physics_hz() -> u32 {
    safectl_core::envs::DEFAULT_PHYSICS_HZ
}
fn default_control_hz() -> u32 {
    safectl_core::envs::DEFAULT_CONTROL_HZ
}
fn default_output_dir() -> String {
    "results".into()
}
fn default_name() -> String {
    "experiment".into()
}

/// Sets `key.path` in a YAML tree, creating intermediate mappings.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("empty segment in `{key}`"));
    }
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if node.is_null() {
            *node = Value::Mapping(Default::default());
        }
        node = match node {
            Value::Mapping(map) => {
                let k = Value::String((*part).to_string());
                if last {
                    map.insert(k, value);
                    return Ok(());
                }
                map.entry(k).or_insert(Value::Null)
            }
            Value::Sequence(seq) => {
                let idx: usize = part.parse().map_err(|_| format!("`{part}` indexes a list"))?;
                let slot = seq.get_mut(idx).ok_or_else(|| format!("index {idx} out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("`{part}` is below a scalar")),
        };
    }
    Ok(())
}

/// Parses a config from YAML text with `key=value` overrides applied first.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut tree: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| ConfigError::Override(ov.clone()))?;
        let value: Value = serde_yaml::from_str(raw).map_err(|_| ConfigError::Override(ov.clone()))?;
        set_path(&mut tree, key.trim(), value).map_err(|e| ConfigError::schema(key.trim(), e))?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::schema(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    crate::build::validate(&cfg)?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, overrides)
}

/// Canonical YAML: every default spelled out, fields in declaration order.
pub fn dump_config(cfg: &ExperimentConfig) -> String {
    serde_yaml::to_string(cfg).unwrap_or_default()
}
