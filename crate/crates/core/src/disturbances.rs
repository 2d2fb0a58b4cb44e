//! Seeded perturbations: additive action/observation/force disturbances,
//! initial-state randomization and inertial-parameter randomization.
//!
//! Every random draw is a pure function of
//! `(master seed, episode, step, stream, channel, draw)`: the tuple is mixed
//! into a 64-bit key that seeds a fresh ChaCha8 generator. Draws therefore do
//! not depend on evaluation order, which keeps parallel sweeps reproducible.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dynamics::Params;

/// Attempts at drawing strictly positive inertial parameters.
pub const MAX_PARAM_RESAMPLES: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisturbanceError {
    #[error("invalid disturbance: {0}")]
    InvalidSpec(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("parameter {name} stayed non-positive after {tries} draws")]
    DegenerateDistribution { name: String, tries: u32 },
}

/// Independent random streams. Disturbance specs get one stream each,
/// offset by their position in the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    InitialState,
    Params,
    Disturbance(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InitialState => 1,
            Stream::Params => 2,
            Stream::Disturbance(i) => 16 + i as u64,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPlan {
    pub master: u64,
}

impl SeedPlan {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    fn rng(&self, episode: u64, step: u64, stream: Stream, channel: u64, draw: u64) -> ChaCha8Rng {
        let mut key = mix(self.master);
        for part in [episode, step, stream.id(), channel, draw] {
            key = mix(key ^ part);
        }
        ChaCha8Rng::seed_from_u64(key)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&self, episode: u64, step: u64, stream: Stream, channel: u64, draw: u64) -> f64 {
        self.rng(episode, step, stream, channel, draw).random::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&self, episode: u64, step: u64, stream: Stream, channel: u64, draw: u64) -> f64 {
        self.rng(episode, step, stream, channel, draw).sample(StandardNormal)
    }
}

/// Offset added to a nominal value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Distribution {
    #[default]
    None,
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
    /// Deterministic offset, used for sweep grids.
    Constant { value: f64 },
}

impl Distribution {
    fn validate(&self, what: &str) -> Result<(), DisturbanceError> {
        let ok = match *self {
            Distribution::None => true,
            Distribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Distribution::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            Distribution::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(DisturbanceError::InvalidSpec(format!("malformed distribution for {what}: {self:?}")))
        }
    }

    fn sample(&self, plan: &SeedPlan, episode: u64, stream: Stream, channel: u64, draw: u64) -> f64 {
        match *self {
            Distribution::None => 0.0,
            Distribution::Uniform { lo, hi } => lo + (hi - lo) * plan.uniform(episode, 0, stream, channel, draw),
            Distribution::Gaussian { mean, std } => mean + std * plan.normal(episode, 0, stream, channel, draw),
            Distribution::Constant { value } => value,
        }
    }
}

/// Per-episode randomization of the initial state and the true parameters,
/// plus the scaling applied to the prior model handed to controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationSpec {
    /// One entry per state channel, or empty for no randomization.
    pub x0: Vec<Distribution>,
    pub params: BTreeMap<String, Distribution>,
    pub prior_scaling: f64,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            x0: Vec::new(),
            params: BTreeMap::new(),
            prior_scaling: 1.0,
        }
    }
}

impl RandomizationSpec {
    pub fn validate(&self, n_x: usize, nominal: &Params) -> Result<(), DisturbanceError> {
        if !self.x0.is_empty() && self.x0.len() != n_x {
            return Err(DisturbanceError::InvalidSpec(format!(
                "initial-state randomization has {} channels, state has {n_x}",
                self.x0.len()
            )));
        }
        for (i, d) in self.x0.iter().enumerate() {
            d.validate(&format!("x0[{i}]"))?;
        }
        for (name, d) in &self.params {
            if !nominal.inertial_names().contains(&name.as_str()) {
                return Err(DisturbanceError::UnknownParameter(name.clone()));
            }
            d.validate(name)?;
        }
        if !(self.prior_scaling > 0.0 && self.prior_scaling.is_finite()) {
            return Err(DisturbanceError::InvalidSpec(format!(
                "prior scaling must be positive, got {}",
                self.prior_scaling
            )));
        }
        Ok(())
    }

    pub fn sample_initial_state(&self, nominal: &DVector<f64>, plan: &SeedPlan, episode: u64) -> DVector<f64> {
        let mut x0 = nominal.clone();
        for (i, d) in self.x0.iter().enumerate() {
            x0[i] += d.sample(plan, episode, Stream::InitialState, i as u64, 0);
        }
        x0
    }

    /// True parameters for an episode; non-positive draws are redrawn.
    pub fn sample_params(&self, nominal: &Params, plan: &SeedPlan, episode: u64) -> Result<Params, DisturbanceError> {
        let mut out = *nominal;
        for (channel, (name, d)) in self.params.iter().enumerate() {
            let base = nominal
                .get(name)
                .ok_or_else(|| DisturbanceError::UnknownParameter(name.clone()))?;
            let value = (0..MAX_PARAM_RESAMPLES as u64)
                .map(|draw| base + d.sample(plan, episode, Stream::Params, channel as u64, draw))
                .find(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| DisturbanceError::DegenerateDistribution {
                    name: name.clone(),
                    tries: MAX_PARAM_RESAMPLES,
                })?;
            out = out
                .with(name, value)
                .ok_or_else(|| DisturbanceError::UnknownParameter(name.clone()))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DisturbanceTarget {
    Action,
    Observation,
    /// Additive generalized accelerations through the integrator's extra-force channel.
    Dynamics,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceKind {
    /// Zero-mean Gaussian noise, one standard deviation per channel.
    WhiteNoise { std: Vec<f64> },
    /// Constant offset from `onset` on.
    Step { magnitude: Vec<f64>, onset: usize },
    /// Offset at a single step.
    Impulse { magnitude: Vec<f64>, step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub target: DisturbanceTarget,
    pub kind: DisturbanceKind,
    pub channels: Vec<usize>,
}

impl DisturbanceSpec {
    /// Checks shapes against a target vector of length `len` and an episode of `steps` steps.
    pub fn validate(&self, len: usize, steps: usize) -> Result<(), DisturbanceError> {
        if let Some(&c) = self.channels.iter().find(|&&c| c >= len) {
            return Err(DisturbanceError::InvalidSpec(format!(
                "channel {c} out of range for {:?} vector of length {len}",
                self.target
            )));
        }
        let (values, index) = match &self.kind {
            DisturbanceKind::WhiteNoise { std } => {
                if std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
                    return Err(DisturbanceError::InvalidSpec("noise std must be non-negative".into()));
                }
                (std, None)
            }
            DisturbanceKind::Step { magnitude, onset } => (magnitude, Some(*onset)),
            DisturbanceKind::Impulse { magnitude, step } => (magnitude, Some(*step)),
        };
        if values.len() != self.channels.len() {
            return Err(DisturbanceError::InvalidSpec(format!(
                "{} magnitudes for {} channels",
                values.len(),
                self.channels.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DisturbanceError::InvalidSpec("magnitudes must be finite".into()));
        }
        if let Some(i) = index {
            if i > steps {
                return Err(DisturbanceError::InvalidSpec(format!(
                    "step index {i} beyond episode length {steps}"
                )));
            }
        }
        Ok(())
    }

    /// Perturbation to add at `step`; `stream` must be unique within a plan.
    pub fn offset(&self, len: usize, plan: &SeedPlan, stream: Stream, episode: u64, step: usize) -> DVector<f64> {
        let mut out = DVector::zeros(len);
        match &self.kind {
            DisturbanceKind::WhiteNoise { std } => {
                for (&c, &s) in self.channels.iter().zip(std) {
                    if s > 0.0 {
                        out[c] += s * plan.normal(episode, step as u64, stream, c as u64, 0);
                    }
                }
            }
            DisturbanceKind::Step { magnitude, onset } => {
                if step >= *onset {
                    for (&c, &m) in self.channels.iter().zip(magnitude) {
                        out[c] += m;
                    }
                }
            }
            DisturbanceKind::Impulse { magnitude, step: at } => {
                if step == *at {
                    for (&c, &m) in self.channels.iter().zip(magnitude) {
                        out[c] += m;
                    }
                }
            }
        }
        out
    }
}

/// All additive disturbances of an environment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbancePlan {
    pub specs: Vec<DisturbanceSpec>,
    /// Externally scripted generalized accelerations, one entry per control
    /// step; steps past the end of the schedule receive none.
    pub force_schedule: Vec<DVector<f64>>,
}

impl DisturbancePlan {
    pub fn new(specs: Vec<DisturbanceSpec>) -> Self {
        Self {
            specs,
            force_schedule: Vec::new(),
        }
    }

    /// Sum of the offsets of every spec aimed at `target`.
    pub fn apply(
        &self,
        target: DisturbanceTarget,
        value: &DVector<f64>,
        plan: &SeedPlan,
        episode: u64,
        step: usize,
    ) -> DVector<f64> {
        let mut out = value.clone();
        for (i, spec) in self.specs.iter().enumerate().filter(|(_, s)| s.target == target) {
            out += spec.offset(value.len(), plan, Stream::Disturbance(i), episode, step);
        }
        out
    }

    /// Generalized acceleration for a control step: dynamics-targeted specs
    /// plus the scripted schedule.
    pub fn dynamics_force(&self, dof: usize, plan: &SeedPlan, episode: u64, step: usize) -> Option<DVector<f64>> {
        let has_specs = self.specs.iter().any(|s| s.target == DisturbanceTarget::Dynamics);
        let scheduled = self.force_schedule.get(step);
        if !has_specs && scheduled.is_none() {
            return None;
        }
        let mut force = self.apply(DisturbanceTarget::Dynamics, &DVector::zeros(dof), plan, episode, step);
        if let Some(f) = scheduled {
            force += f;
        }
        Some(force)
    }
}
