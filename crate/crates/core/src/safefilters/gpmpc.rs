use nalgebra::{DMatrix, DVector};

use super::gp::GpModel;
use super::FilterError;
use crate::controllers::{Controller, ControllerError, MpcController, MpcMode, MpcSolution, StageModel};
use crate::dynamics::{DynamicsModel, StepSensitivity};

/// Two-sided 95% quantile.
pub const DEFAULT_Z_SCORE: f64 = 1.96;

/// Stacked GP input `[x; u]`.
fn gp_input(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// Observed next state minus the prior's one-step prediction.
pub fn residual_target(
    prior: &DynamicsModel,
    dt: f64,
    substeps: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), FilterError> {
    let predicted = prior.rk4_sensitivity(x, u, dt, substeps)?.x_next;
    Ok((gp_input(x, u), x_next - predicted))
}

/// The prior step corrected by the GP mean, reporting the GP variance.
#[derive(Debug, Clone, Copy)]
pub struct GpStage<'a> {
    pub prior: &'a DynamicsModel,
    pub gp: &'a GpModel,
    pub dt: f64,
    pub substeps: usize,
}

impl StageModel for GpStage<'_> {
    fn sensitivity(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<StepSensitivity, ControllerError> {
        let mut s = self.prior.rk4_sensitivity(x, u, self.dt, self.substeps)?;
        // An empty GP contributes nothing; skipping keeps the prior path bit-for-bit.
        if self.gp.is_empty() {
            return Ok(s);
        }
        let q = gp_input(x, u);
        let (mean, _) = self.gp.predict(&q);
        let jac: DMatrix<f64> = self.gp.mean_jacobian(&q);
        let n = x.len();
        s.x_next += mean;
        s.fx += jac.columns(0, n);
        s.fu += jac.columns(n, u.len());
        Ok(s)
    }

    fn variance(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DVector<f64>> {
        if self.gp.is_empty() {
            None
        } else {
            Some(self.gp.predict(&gp_input(x, u)).1)
        }
    }
}

/// Nonlinear MPC on the GP-corrected prior with variance-tightened constraints.
#[derive(Debug, Clone)]
pub struct GpMpcController {
    mpc: MpcController,
    gp: GpModel,
    pub z_score: f64,
}

impl GpMpcController {
    pub fn new(mpc: MpcController, gp: GpModel, z_score: f64) -> Result<Self, FilterError> {
        if mpc.config().mode != MpcMode::Nonlinear {
            return Err(FilterError::InvalidConfig("GP-MPC needs a nonlinear MPC".into()));
        }
        let n = mpc.prior().n_x();
        let m = mpc.prior().n_u();
        if gp.input_dim() != n + m || gp.output_dim() != n {
            return Err(FilterError::DimensionMismatch(format!(
                "GP maps {} -> {}, expected {} -> {n}",
                gp.input_dim(),
                gp.output_dim(),
                n + m
            )));
        }
        if !(z_score >= 0.0) {
            return Err(FilterError::InvalidConfig(format!("z-score {z_score}")));
        }
        Ok(Self { mpc, gp, z_score })
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    /// Swaps in a refitted model; warm starts are kept.
    pub fn set_gp(&mut self, gp: GpModel) -> Result<(), FilterError> {
        if gp.input_dim() != self.gp.input_dim() || gp.output_dim() != self.gp.output_dim() {
            return Err(FilterError::DimensionMismatch("replacement GP".into()));
        }
        self.gp = gp;
        Ok(())
    }

    pub fn mpc(&self) -> &MpcController {
        &self.mpc
    }

    /// Plans from `x_now`; the solution carries the accumulated variances.
    pub fn plan(&mut self, x_now: &DVector<f64>, step: usize) -> Result<MpcSolution, ControllerError> {
        let prior = self.mpc.prior().clone();
        let stage = GpStage {
            prior: &prior,
            gp: &self.gp,
            dt: self.mpc.dt(),
            substeps: self.mpc.config().substeps,
        };
        self.mpc.solve_with(x_now, step, &stage, self.z_score)
    }
}

impl Controller for GpMpcController {
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError> {
        Ok(self.plan(obs, step)?.u0)
    }

    fn reset(&mut self) {
        self.mpc.reset();
    }
}
