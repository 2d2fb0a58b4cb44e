use nalgebra::DVector;

use super::{check_len, Controller, ControllerError};
use crate::dynamics::{DynamicsModel, Params, SystemId};
use crate::envs::TaskSpec;

/// Gains of the cascade. Position gains act per axis; the attitude gains
/// only matter for the planar quadrotor.
#[derive(Debug, Clone, PartialEq)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Clamp on the integrated position error (anti-windup).
    pub integral_limit: f64,
    pub attitude_kp: f64,
    pub attitude_kd: f64,
    /// Largest commanded pitch magnitude.
    pub max_tilt: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 4.0,
            ki: 0.5,
            kd: 3.2,
            integral_limit: 1.0,
            attitude_kp: 100.0,
            attitude_kd: 14.0,
            max_tilt: 0.5,
        }
    }
}

/// Position PD with integral action and reference feedforward feeding a
/// thrust command; on the planar quadrotor the desired acceleration also sets
/// a pitch target tracked by an inner PD loop.
#[derive(Debug, Clone)]
pub struct PidController {
    params: Params,
    task: TaskSpec,
    gains: PidGains,
    dt: f64,
    integral: [f64; 2],
}

impl PidController {
    pub fn new(prior: &DynamicsModel, task: TaskSpec, dt: f64, gains: PidGains) -> Result<Self, ControllerError> {
        if prior.system_id() == SystemId::CartPole {
            return Err(ControllerError::UnsupportedSystem(SystemId::CartPole));
        }
        if !(dt > 0.0) {
            return Err(ControllerError::InvalidConfig(format!("control period {dt}")));
        }
        Ok(Self {
            params: *prior.params(),
            task,
            gains,
            dt,
            integral: [0.0; 2],
        })
    }

    /// Reference acceleration by finite differences of the reference velocity.
    fn ref_accel(&self, step: usize, vel_index: usize) -> f64 {
        let next = self.task.x_ref_at(step + 1)[vel_index];
        let now = self.task.x_ref_at(step)[vel_index];
        (next - now) / self.dt
    }

    fn axis(&mut self, axis: usize, err: f64, derr: f64, feedforward: f64) -> f64 {
        let g = &self.gains;
        let limit = g.integral_limit;
        self.integral[axis] = (self.integral[axis] + err * self.dt).clamp(-limit, limit);
        g.kp * err + g.ki * self.integral[axis] + g.kd * derr + feedforward
    }
}

impl Controller for PidController {
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError> {
        let r = self.task.x_ref_at(step).clone();
        match self.params {
            Params::Quad1D(p) => {
                check_len("observation", obs, 2)?;
                let ff = self.ref_accel(step, 1);
                let acc = self.axis(0, r[0] - obs[0], r[1] - obs[1], ff);
                Ok(DVector::from_element(1, p.m * (p.g + acc)))
            }
            Params::Quad2D(p) => {
                check_len("observation", obs, 6)?;
                let ax = self.axis(0, r[0] - obs[0], r[1] - obs[1], self.ref_accel(step, 1));
                let az = self.axis(1, r[2] - obs[2], r[3] - obs[3], self.ref_accel(step, 3));
                let up = (p.g + az).max(0.1 * p.g);
                let pitch = ax.atan2(up).clamp(-self.gains.max_tilt, self.gains.max_tilt);
                let thrust = p.m * up / obs[4].cos().max(0.5);
                let alpha = self.gains.attitude_kp * (pitch - obs[4]) - self.gains.attitude_kd * obs[5];
                // θ̈ = (T₂ − T₁) d / I.
                let diff = alpha * p.i_yy / p.moment_arm();
                Ok(DVector::from_vec(vec![(thrust - diff) / 2.0, (thrust + diff) / 2.0]))
            }
            Params::CartPole(_) => Err(ControllerError::UnsupportedSystem(SystemId::CartPole)),
        }
    }

    fn reset(&mut self) {
        self.integral = [0.0; 2];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::stabilization_task;
    use nalgebra::DMatrix;

    fn hover_task(model: &DynamicsModel, goal: DVector<f64>) -> TaskSpec {
        let n = goal.len();
        let k = model.n_u();
        stabilization_task(model, goal, DMatrix::identity(n, n), DMatrix::identity(k, k), 50)
    }

    #[test]
    fn hover_at_reference() {
        for system in [SystemId::Quad1D, SystemId::Quad2D] {
            let model = DynamicsModel::default_for(system);
            let mut goal = DVector::zeros(system.n_x());
            goal[if system == SystemId::Quad1D { 0 } else { 2 }] = 1.0;
            let mut pid = PidController::new(&model, hover_task(&model, goal.clone()), 0.02, PidGains::default()).unwrap();
            let u = pid.act(&goal, 0).unwrap();
            assert!((u - model.equilibrium_input()).amax() < 1e-15);
        }
    }

    #[test]
    fn below_reference_pushes_up() {
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let goal = DVector::from_vec(vec![1.0, 0.0]);
        let mut pid = PidController::new(&model, hover_task(&model, goal), 0.02, PidGains::default()).unwrap();
        let u = pid.act(&DVector::from_vec(vec![0.9, 0.0]), 0).unwrap();
        assert!(u[0] > 0.027 * 9.8);
    }

    #[test]
    fn cartpole_is_rejected() {
        let model = DynamicsModel::default_for(SystemId::CartPole);
        let err = PidController::new(&model, hover_task(&model, DVector::zeros(4)), 0.02, PidGains::default());
        assert!(matches!(err, Err(ControllerError::UnsupportedSystem(SystemId::CartPole))));
    }

    #[test]
    fn integral_is_clamped() {
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let goal = DVector::from_vec(vec![100.0, 0.0]);
        let gains = PidGains::default();
        let mut pid = PidController::new(&model, hover_task(&model, goal), 0.02, gains.clone()).unwrap();
        for i in 0..1000 {
            pid.act(&DVector::zeros(2), i % 50).unwrap();
        }
        assert_eq!(pid.integral[0], gains.integral_limit);
    }
}
