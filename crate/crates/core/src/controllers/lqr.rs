use nalgebra::{DMatrix, DVector};

use super::{check_len, Controller, ControllerError};
use crate::dynamics::{DynamicsModel, SystemId};
use crate::envs::TaskSpec;
use crate::numopt::{solve_care, solve_dare};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqrMode {
    Continuous,
    Discrete,
}

/// Time-invariant state feedback `u = uʳᵉᶠ − K (x − xʳᵉᶠ)` designed about
/// `(x_op, u_op)` and evaluated against the task reference.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrPolicy {
    pub gain: DMatrix<f64>,
    pub x_op: DVector<f64>,
    pub u_op: DVector<f64>,
    pub mode: LqrMode,
    task: TaskSpec,
}

/// Rest state at the position of `x`: velocities and angles zeroed.
pub fn equilibrium_state(system: SystemId, x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    let zeroed: &[usize] = match system {
        SystemId::CartPole => &[1, 2, 3],
        SystemId::Quad1D => &[1],
        SystemId::Quad2D => &[1, 3, 4, 5],
    };
    for &i in zeroed {
        out[i] = 0.0;
    }
    out
}

/// Linearizes the prior about the rest state at the first reference and
/// solves the matching Riccati equation.
pub fn lqr_synthesize(prior: &DynamicsModel, task: &TaskSpec, dt: f64, mode: LqrMode) -> Result<LqrPolicy, ControllerError> {
    let system = prior.system_id();
    let x_op = equilibrium_state(system, task.x_ref_at(0));
    let u_op = prior.equilibrium_input();
    let gain = match mode {
        LqrMode::Continuous => {
            let (a, b) = prior.jacobians(&x_op, &u_op)?;
            solve_care(&a, &b, &task.q, &task.r)?.k
        }
        LqrMode::Discrete => {
            let lin = prior.linearize_discrete(&x_op, &u_op, dt)?;
            solve_dare(&lin.ad, &lin.bd, &task.q, &task.r)?.k
        }
    };
    Ok(LqrPolicy {
        gain,
        x_op,
        u_op,
        mode,
        task: task.clone(),
    })
}

impl LqrPolicy {
    pub fn input(&self, x: &DVector<f64>, step: usize) -> DVector<f64> {
        self.task.u_ref_at(step) - &self.gain * (x - self.task.x_ref_at(step))
    }
}

impl Controller for LqrPolicy {
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError> {
        check_len("observation", obs, self.x_op.len())?;
        Ok(self.input(obs, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::stabilization_task;

    #[test]
    fn quad1d_continuous_gain_closed_form() {
        // With B = [0, 1/m]ᵀ, Q = I and R = 1 the Riccati solution gives
        // K = [1, √(2m + 1)] (independent of the 1/m input scaling in the
        // position entry).
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let task = stabilization_task(&model, DVector::zeros(2), DMatrix::identity(2, 2), DMatrix::identity(1, 1), 10);
        let pol = lqr_synthesize(&model, &task, 0.02, LqrMode::Continuous).unwrap();
        let m = 0.027;
        assert!((pol.gain[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((pol.gain[(0, 1)] - (2.0 * m + 1.0f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn cartpole_closed_loop_is_stable() {
        let model = DynamicsModel::default_for(SystemId::CartPole);
        let task = stabilization_task(&model, DVector::zeros(4), DMatrix::identity(4, 4), DMatrix::identity(1, 1), 10);
        for mode in [LqrMode::Continuous, LqrMode::Discrete] {
            let pol = lqr_synthesize(&model, &task, 0.02, mode).unwrap();
            let (a, b) = model.jacobians(&pol.x_op, &pol.u_op).unwrap();
            let eig = (a - b * &pol.gain).complex_eigenvalues();
            assert!(eig.iter().all(|e| e.re < 0.0), "{mode:?}: {eig}");
        }
    }

    #[test]
    fn at_reference_returns_reference_input() {
        let model = DynamicsModel::default_for(SystemId::Quad2D);
        let goal = DVector::from_vec(vec![0.3, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let task = stabilization_task(&model, goal.clone(), DMatrix::identity(6, 6), DMatrix::identity(2, 2), 10);
        let mut pol = lqr_synthesize(&model, &task, 0.02, LqrMode::Discrete).unwrap();
        assert_eq!(pol.act(&goal, 3).unwrap(), model.equilibrium_input());
    }

    #[test]
    fn gain_is_position_invariant() {
        let model = DynamicsModel::default_for(SystemId::Quad2D);
        let q = DMatrix::identity(6, 6);
        let r = DMatrix::identity(2, 2);
        let a = stabilization_task(&model, DVector::zeros(6), q.clone(), r.clone(), 5);
        let mut shifted = DVector::zeros(6);
        shifted[0] = 1.0;
        shifted[2] = 2.0;
        shifted[1] = 0.5;
        let b = stabilization_task(&model, shifted, q, r, 5);
        let ka = lqr_synthesize(&model, &a, 0.02, LqrMode::Discrete).unwrap().gain;
        let kb = lqr_synthesize(&model, &b, 0.02, LqrMode::Discrete).unwrap().gain;
        assert!((ka - kb).amax() < 1e-12);
    }
}
