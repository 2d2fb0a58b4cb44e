//! Learning and certification layers that sit between a controller and the
//! environment: GP residual learning with GP-MPC, a CBF-QP input filter and
//! a predictive safety filter.

mod cbf;
mod gp;
mod gpmpc;
mod mpsc;

pub use cbf::{cbf_filter, CbfFilter, CbfOutput, CbfSpec, DEFAULT_CBF_GAMMA, DEFAULT_CBF_PENALTY};
pub use gp::{log_marginal_likelihood, GpHyper, GpModel, GpSettings, TransitionBuffer, DEFAULT_RESERVOIR};
pub use gpmpc::{residual_target, GpMpcController, GpStage, DEFAULT_Z_SCORE};
pub use mpsc::{MpscConfig, MpscFilter, MpscOutput, DEFAULT_MPSC_BACKOFF, DEFAULT_MPSC_HORIZON, DEFAULT_TERMINAL_HALF_WIDTH};

use nalgebra::DVector;
use thiserror::Error;

use crate::constraints::ConstraintError;
use crate::controllers::ControllerError;
use crate::dynamics::DynamicsError;
use crate::numopt::NumoptError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numeric(#[from] NumoptError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Result of passing a proposed input through a safety filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub u_safe: DVector<f64>,
    pub modified: bool,
}

/// Replaces a proposed input with one deemed safe at state `x`.
pub trait SafetyFilter: Send {
    fn filter(&mut self, x: &DVector<f64>, u_proposed: &DVector<f64>, step: usize) -> Result<FilterOutcome, FilterError>;

    fn reset(&mut self) {}
}
