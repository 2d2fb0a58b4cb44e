use nalgebra::{DMatrix, DVector};

use super::{check_len, Controller, ControllerError};
use crate::dynamics::{DynamicsModel, StepSensitivity};
use crate::envs::TaskSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct IlqrSettings {
    pub max_iter: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// RK4 substeps per control step in the prediction model.
    pub substeps: usize,
}

impl Default for IlqrSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            rel_tol: 1e-6,
            reg_min: 1e-6,
            reg_max: 1e6,
            reg_factor: 10.0,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 20,
            substeps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlqrSolution {
    /// `L + 1` nominal states.
    pub states: Vec<DVector<f64>>,
    /// `L` nominal inputs.
    pub inputs: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub feedforwards: Vec<DVector<f64>>,
    pub cost: f64,
    /// Backward/forward passes performed.
    pub iterations: usize,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub cost_history: Vec<f64>,
}

struct Problem<'a> {
    model: &'a DynamicsModel,
    task: &'a TaskSpec,
    start: usize,
    horizon: usize,
    dt: f64,
    substeps: usize,
}

impl Problem<'_> {
    fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let stage: f64 = us
            .iter()
            .enumerate()
            .map(|(i, u)| self.task.state_cost(self.start + i, &xs[i]) + self.task.input_cost(self.start + i, u))
            .sum();
        stage + self.task.state_cost(self.start + self.horizon, &xs[self.horizon])
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ControllerError> {
        let h = self.dt / self.substeps as f64;
        let mut s = x.clone();
        for _ in 0..self.substeps {
            s = self.model.rk4_step(&s, u, h, None)?;
        }
        Ok(s)
    }

    fn rollout(&self, x0: &DVector<f64>, us: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, ControllerError> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(x0.clone());
        for u in us {
            let next = self.step(xs.last().unwrap_or(x0), u)?;
            xs.push(next);
        }
        Ok(xs)
    }
}

struct BackwardPass {
    gains: Vec<DMatrix<f64>>,
    feedforwards: Vec<DVector<f64>>,
    /// Coefficients of the expected change `α d1 + α²/2 d2`.
    d1: f64,
    d2: f64,
}

fn backward(
    prob: &Problem,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    sens: &[StepSensitivity],
    reg: f64,
) -> Option<BackwardPass> {
    let task = prob.task;
    let n = xs[0].len();
    let l = prob.horizon;
    let mut vx = &task.q * (&xs[l] - task.x_ref_at(prob.start + l));
    let mut vxx = task.q.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); l];
    let mut ffs = vec![DVector::zeros(0); l];
    let (mut d1, mut d2) = (0.0, 0.0);
    for i in (0..l).rev() {
        let (fx, fu) = (&sens[i].fx, &sens[i].fu);
        let lx = &task.q * (&xs[i] - task.x_ref_at(prob.start + i));
        let lu = &task.r * (&us[i] - task.u_ref_at(prob.start + i));
        let vxx_reg = &vxx + DMatrix::identity(n, n) * reg;
        let qx = lx + fx.transpose() * &vx;
        let qu = lu + fu.transpose() * &vx;
        let qxx = &task.q + fx.transpose() * &vxx * fx;
        let quu = &task.r + fu.transpose() * &vxx_reg * fu;
        let qux = fu.transpose() * &vxx_reg * fx;
        let quu = (&quu + quu.transpose()) * 0.5;
        let chol = quu.clone().cholesky()?;
        let k_ff = -chol.solve(&qu);
        let k_fb = -chol.solve(&qux);
        d1 += k_ff.dot(&qu);
        d2 += k_ff.dot(&(&quu * &k_ff));
        vx = &qx + k_fb.transpose() * &quu * &k_ff + k_fb.transpose() * &qu + qux.transpose() * &k_ff;
        vxx = &qxx + k_fb.transpose() * &quu * &k_fb + k_fb.transpose() * &qux + qux.transpose() * &k_fb;
        vxx = (&vxx + vxx.transpose()) * 0.5;
        gains[i] = k_fb;
        ffs[i] = k_ff;
    }
    Some(BackwardPass {
        gains,
        feedforwards: ffs,
        d1,
        d2,
    })
}

/// Trajectory optimization over the task window `[start, start + horizon]`
/// from `x0`, initialized with the reference inputs.
pub fn ilqr_solve(
    prior: &DynamicsModel,
    task: &TaskSpec,
    x0: &DVector<f64>,
    start: usize,
    horizon: usize,
    dt: f64,
    settings: &IlqrSettings,
) -> Result<IlqrSolution, ControllerError> {
    check_len("initial state", x0, prior.n_x())?;
    if horizon == 0 || settings.substeps == 0 || !(dt > 0.0) {
        return Err(ControllerError::InvalidConfig(
            "horizon, substeps and step length must be positive".into(),
        ));
    }
    let prob = Problem {
        model: prior,
        task,
        start,
        horizon,
        dt,
        substeps: settings.substeps,
    };
    let mut us: Vec<DVector<f64>> = (0..horizon).map(|i| task.u_ref_at(start + i).clone()).collect();
    let mut xs = prob.rollout(x0, &us)?;
    let mut cost = prob.cost(&xs, &us);
    let mut history = vec![cost];
    let mut reg = settings.reg_min;
    let mut gains = Vec::new();
    let mut ffs = Vec::new();
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let sens = xs[..horizon]
            .iter()
            .zip(&us)
            .map(|(x, u)| prior.rk4_sensitivity(x, u, dt, settings.substeps))
            .collect::<Result<Vec<_>, _>>()?;

        let mut accepted = None;
        while accepted.is_none() {
            let Some(bp) = backward(&prob, &xs, &us, &sens, reg) else {
                reg *= settings.reg_factor;
                if reg > settings.reg_max {
                    return Err(ControllerError::Diverged("regularization ladder exhausted".into()));
                }
                continue;
            };
            if -bp.d1 <= 1e-12 * cost.abs() {
                // Already stationary: nothing left to gain.
                accepted = Some((bp, xs.clone(), us.clone(), cost));
                break;
            }
            let mut alpha = 1.0;
            for _ in 0..=settings.max_backtracks {
                let mut x = x0.clone();
                let mut new_xs = vec![x.clone()];
                let mut new_us = Vec::with_capacity(horizon);
                let mut ok = true;
                for i in 0..horizon {
                    let u = &us[i] + &bp.feedforwards[i] * alpha + &bp.gains[i] * (&x - &xs[i]);
                    match prob.step(&x, &u) {
                        Ok(next) => x = next,
                        Err(_) => {
                            ok = false;
                            break;
                        }
                    }
                    new_xs.push(x.clone());
                    new_us.push(u);
                }
                if ok {
                    let new_cost = prob.cost(&new_xs, &new_us);
                    let expected = -(alpha * bp.d1 + 0.5 * alpha * alpha * bp.d2);
                    if new_cost <= cost && cost - new_cost >= settings.armijo * expected {
                        accepted = Some((bp, new_xs, new_us, new_cost));
                        break;
                    }
                }
                alpha *= settings.backtrack;
            }
            if accepted.is_none() {
                reg *= settings.reg_factor;
                if reg > settings.reg_max {
                    return Err(ControllerError::Diverged("line search failed at maximum regularization".into()));
                }
            }
        }
        let Some((bp, new_xs, new_us, new_cost)) = accepted else {
            unreachable!("loop exits only with an accepted step")
        };
        let decrease = cost - new_cost;
        debug_assert!(new_cost <= cost);
        xs = new_xs;
        us = new_us;
        gains = bp.gains;
        ffs = bp.feedforwards;
        cost = new_cost;
        history.push(cost);
        reg = (reg / settings.reg_factor).max(settings.reg_min);
        if decrease <= settings.rel_tol * history[history.len() - 2].abs() {
            break;
        }
    }
    Ok(IlqrSolution {
        states: xs,
        inputs: us,
        gains,
        feedforwards: ffs,
        cost,
        iterations,
        cost_history: history,
    })
}

/// Plans once from the first observation over the rest of the task and then
/// tracks the plan with the local feedback gains.
#[derive(Debug, Clone)]
pub struct IlqrController {
    prior: DynamicsModel,
    task: TaskSpec,
    dt: f64,
    settings: IlqrSettings,
    plan: Option<(usize, IlqrSolution)>,
}

impl IlqrController {
    pub fn new(prior: DynamicsModel, task: TaskSpec, dt: f64, settings: IlqrSettings) -> Self {
        Self {
            prior,
            task,
            dt,
            settings,
            plan: None,
        }
    }

    pub fn plan(&self) -> Option<&IlqrSolution> {
        self.plan.as_ref().map(|(_, p)| p)
    }
}

impl Controller for IlqrController {
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError> {
        check_len("observation", obs, self.prior.n_x())?;
        let needs_plan = match &self.plan {
            Some((start, sol)) => step < *start || step - start >= sol.inputs.len(),
            None => true,
        };
        if needs_plan {
            let horizon = self.task.steps.saturating_sub(step).max(1);
            let sol = ilqr_solve(&self.prior, &self.task, obs, step, horizon, self.dt, &self.settings)?;
            self.plan = Some((step, sol));
        }
        let (start, sol) = self.plan.as_ref().ok_or_else(|| ControllerError::Diverged("no plan".into()))?;
        let i = step - start;
        Ok(&sol.inputs[i] + &sol.gains[i] * (obs - &sol.states[i]))
    }

    fn reset(&mut self) {
        self.plan = None;
    }
}
