//! Model-based baselines. Each controller is built from the prior model and
//! the task handed out at reset and owns any warm-start state it needs.

mod ilqr;
mod lqr;
mod mpc;
mod pid;

pub use ilqr::{ilqr_solve, IlqrController, IlqrSettings, IlqrSolution};
pub use lqr::{equilibrium_state, lqr_synthesize, LqrMode, LqrPolicy};
pub use mpc::{
    condense, CondensedPrediction, MpcConfig, MpcController, MpcDiagnostics, MpcMode, MpcSolution, PriorStage,
    StageModel,
    DEFAULT_BACKOFF, DEFAULT_HORIZON, DEFAULT_SLACK_PENALTY, DEFAULT_SQP_ITERATIONS,
};
pub use pid::{PidController, PidGains};

use nalgebra::DVector;
use thiserror::Error;

use crate::constraints::ConstraintError;
use crate::dynamics::{DynamicsError, SystemId};
use crate::numopt::NumoptError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("controller does not support system {0:?}")]
    UnsupportedSystem(SystemId),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Numeric(#[from] NumoptError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// A feedback policy driven by the environment loop.
pub trait Controller: Send {
    /// Input for observation `obs` at control step `step`.
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError>;

    /// Drops warm-start and integrator state.
    fn reset(&mut self) {}
}

/// Controller that always commands the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantInput(pub DVector<f64>);

impl Controller for ConstantInput {
    fn act(&mut self, _obs: &DVector<f64>, _step: usize) -> Result<DVector<f64>, ControllerError> {
        Ok(self.0.clone())
    }
}

pub(crate) fn check_len(what: &str, v: &DVector<f64>, expected: usize) -> Result<(), ControllerError> {
    if v.len() != expected {
        return Err(ControllerError::DimensionMismatch(format!(
            "{what} has length {}, expected {expected}",
            v.len()
        )));
    }
    if v.iter().any(|e| !e.is_finite()) {
        return Err(ControllerError::InvalidConfig(format!("{what} is not finite")));
    }
    Ok(())
}
