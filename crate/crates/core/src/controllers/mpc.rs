use nalgebra::{DMatrix, DVector};

use super::{check_len, equilibrium_state, Controller, ControllerError};
use crate::constraints::{ConstraintSet, LinearRows};
use crate::dynamics::{DynamicsModel, LinearizedModel, StepSensitivity};
use crate::envs::{InputBounds, TaskSpec};
use crate::numopt::{solve_dare, solve_qp, QpProblem, QpStatus};

pub const DEFAULT_HORIZON: usize = 25;
pub const DEFAULT_SQP_ITERATIONS: usize = 3;
pub const DEFAULT_SLACK_PENALTY: f64 = 1e6;
/// Extra margin on state rows that absorbs QP tolerance and linearization error.
pub const DEFAULT_BACKOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcMode {
    /// One affine model about the rest state at the first reference.
    Linear,
    /// Sequential QPs on linearizations along the current guess.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub mode: MpcMode,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal weight; the DARE solution of the linearization when `None`.
    pub terminal_weight: Option<DMatrix<f64>>,
    pub constraints: ConstraintSet,
    pub input_bounds: InputBounds,
    pub sqp_iterations: usize,
    /// Fraction of each SQP step taken.
    pub step_damping: f64,
    pub warm_start: bool,
    pub slack_penalty: f64,
    pub backoff: f64,
    /// RK4 substeps per control step in the nonlinear prediction.
    pub substeps: usize,
}

impl MpcConfig {
    pub fn new(mode: MpcMode, task: &TaskSpec, constraints: ConstraintSet, input_bounds: InputBounds) -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            mode,
            q: task.q.clone(),
            r: task.r.clone(),
            terminal_weight: None,
            constraints,
            input_bounds,
            sqp_iterations: DEFAULT_SQP_ITERATIONS,
            step_damping: 1.0,
            warm_start: true,
            slack_penalty: DEFAULT_SLACK_PENALTY,
            backoff: DEFAULT_BACKOFF,
            substeps: 1,
        }
    }

    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<(), ControllerError> {
        let bad = |msg: &str| Err(ControllerError::InvalidConfig(msg.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.mode == MpcMode::Nonlinear && self.sqp_iterations == 0 {
            return bad("nonlinear mode needs at least one SQP iteration");
        }
        if !(self.step_damping > 0.0 && self.step_damping <= 1.0) {
            return bad("step damping must lie in (0, 1]");
        }
        if self.substeps == 0 {
            return bad("substeps must be positive");
        }
        if !(self.slack_penalty > 0.0) || !(self.backoff >= 0.0) {
            return bad("slack penalty must be positive and back-off non-negative");
        }
        if self.q.shape() != (n_x, n_x) || self.r.shape() != (n_u, n_u) {
            return bad("cost weight dimensions");
        }
        if let Some(p) = &self.terminal_weight {
            if p.shape() != (n_x, n_x) {
                return bad("terminal weight dimensions");
            }
        }
        if self.constraints.n_x() != n_x || self.constraints.n_u() != n_u {
            return bad("constraint set dimensions");
        }
        if self.input_bounds.lower.len() != n_u || self.input_bounds.upper.len() != n_u {
            return bad("input bound dimensions");
        }
        Ok(())
    }
}

/// Discrete one-step prediction used by the nonlinear solver.
pub trait StageModel {
    fn sensitivity(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<StepSensitivity, ControllerError>;

    /// Variance of the one-step prediction error per state, when the model
    /// carries an uncertainty estimate.
    fn variance(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }
}

/// The prior model integrated with RK4 over one control period.
#[derive(Debug, Clone, Copy)]
pub struct PriorStage<'a> {
    pub model: &'a DynamicsModel,
    pub dt: f64,
    pub substeps: usize,
}

impl StageModel for PriorStage<'_> {
    fn sensitivity(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<StepSensitivity, ControllerError> {
        Ok(self.model.rk4_sensitivity(x, u, self.dt, self.substeps)?)
    }
}

/// States over a horizon as affine functions of the stacked inputs:
/// `xᵢ = free[i] + gamma[i·n..(i+1)·n, :] · u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedPrediction {
    pub free: Vec<DVector<f64>>,
    pub gamma: DMatrix<f64>,
}

impl CondensedPrediction {
    pub fn state(&self, i: usize, u: &DVector<f64>) -> DVector<f64> {
        let n = self.free[0].len();
        &self.free[i] + self.gamma.rows(i * n, n) * u
    }

    pub fn block(&self, i: usize) -> DMatrix<f64> {
        let n = self.free[0].len();
        self.gamma.rows(i * n, n).into_owned()
    }
}

/// Condenses `x_{i+1} = Aᵢ xᵢ + Bᵢ uᵢ + cᵢ` from `x0` over `a.len()` steps.
pub fn condense(x0: &DVector<f64>, a: &[DMatrix<f64>], b: &[DMatrix<f64>], c: &[DVector<f64>]) -> CondensedPrediction {
    let h = a.len();
    let n = x0.len();
    let m = b.first().map_or(0, |bi| bi.ncols());
    let mut gamma = DMatrix::zeros((h + 1) * n, h * m);
    let mut free = Vec::with_capacity(h + 1);
    free.push(x0.clone());
    for i in 0..h {
        let next = &a[i] * &free[i] + &c[i];
        free.push(next);
        let prev = gamma.view((i * n, 0), (n, i * m)).into_owned();
        gamma.view_mut(((i + 1) * n, 0), (n, i * m)).copy_from(&(&a[i] * prev));
        gamma.view_mut(((i + 1) * n, i * m), (n, m)).copy_from(&b[i]);
    }
    CondensedPrediction { free, gamma }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcDiagnostics {
    pub status: QpStatus,
    pub slack_used: bool,
    pub max_slack: f64,
    pub qp_iterations: usize,
    pub sqp_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u0: DVector<f64>,
    pub inputs: Vec<DVector<f64>>,
    /// `H + 1` predicted states starting at the measured one.
    pub states: Vec<DVector<f64>>,
    /// Accumulated prediction variance per stage, when the model provides one.
    pub variances: Option<Vec<DVector<f64>>>,
    pub diagnostics: MpcDiagnostics,
}

/// Receding-horizon controller over a condensed QP in the stacked inputs.
#[derive(Debug, Clone)]
pub struct MpcController {
    cfg: MpcConfig,
    prior: DynamicsModel,
    task: TaskSpec,
    dt: f64,
    lin: LinearizedModel,
    terminal: DMatrix<f64>,
    previous: Option<Vec<DVector<f64>>>,
    last: Option<MpcSolution>,
}

struct StageData {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DVector<f64>>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, prior: DynamicsModel, task: TaskSpec, dt: f64) -> Result<Self, ControllerError> {
        cfg.validate(prior.n_x(), prior.n_u())?;
        if !(dt > 0.0) {
            return Err(ControllerError::InvalidConfig(format!("control period {dt}")));
        }
        let x_op = equilibrium_state(prior.system_id(), task.x_ref_at(0));
        let lin = prior.linearize_discrete(&x_op, &prior.equilibrium_input(), dt)?;
        let terminal = match &cfg.terminal_weight {
            Some(p) => p.clone(),
            None => solve_dare(&lin.ad, &lin.bd, &cfg.q, &cfg.r)?.p,
        };
        Ok(Self {
            cfg,
            prior,
            task,
            dt,
            lin,
            terminal,
            previous: None,
            last: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &DynamicsModel {
        &self.prior
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn terminal_weight(&self) -> &DMatrix<f64> {
        &self.terminal
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.last.as_ref()
    }

    fn initial_guess(&self, step: usize) -> Vec<DVector<f64>> {
        let h = self.cfg.horizon;
        match (&self.previous, self.cfg.warm_start) {
            (Some(prev), true) => {
                let mut guess: Vec<DVector<f64>> = prev.iter().skip(1).cloned().collect();
                let tail = prev.last().cloned().unwrap_or_else(|| self.task.u_ref_at(step).clone());
                guess.resize(h, tail);
                guess
            }
            _ => (0..h).map(|i| self.task.u_ref_at(step + i).clone()).collect(),
        }
    }

    fn linear_stages(&self) -> StageData {
        let lin = &self.lin;
        let c = &lin.x_ref + &lin.offset - &lin.ad * &lin.x_ref - &lin.bd * &lin.u_ref;
        let h = self.cfg.horizon;
        StageData {
            a: vec![lin.ad.clone(); h],
            b: vec![lin.bd.clone(); h],
            c: vec![c; h],
        }
    }

    fn nonlinear_stages(
        &self,
        model: &dyn StageModel,
        x0: &DVector<f64>,
        us: &[DVector<f64>],
    ) -> Result<(StageData, Vec<DVector<f64>>), ControllerError> {
        let h = us.len();
        let mut data = StageData {
            a: Vec::with_capacity(h),
            b: Vec::with_capacity(h),
            c: Vec::with_capacity(h),
        };
        let mut xs = vec![x0.clone()];
        for u in us {
            let x = xs.last().cloned().unwrap_or_else(|| x0.clone());
            let s = model.sensitivity(&x, u)?;
            data.c.push(&s.x_next - &s.fx * &x - &s.fu * u);
            data.a.push(s.fx);
            data.b.push(s.fu);
            xs.push(s.x_next);
        }
        Ok((data, xs))
    }

    /// Per-stage constraint sets tightened by `z_score` standard deviations
    /// of the accumulated model variance along `(xs, us)`.
    fn stage_constraints(
        &self,
        model: &dyn StageModel,
        xs: &[DVector<f64>],
        us: &[DVector<f64>],
        z_score: f64,
    ) -> Result<(Vec<ConstraintSet>, Option<Vec<DVector<f64>>>), ControllerError> {
        let h = self.cfg.horizon;
        let n = self.prior.n_x();
        let mut acc = DVector::zeros(n);
        let mut variances = vec![acc.clone()];
        for (x, u) in xs.iter().zip(us) {
            match model.variance(x, u) {
                Some(v) => {
                    acc += v;
                    variances.push(acc.clone());
                }
                None => return Ok((vec![self.cfg.constraints.clone(); h + 1], None)),
            }
        }
        let specs = self.cfg.constraints.specs();
        let mut margins = Vec::with_capacity(h + 1);
        for (i, var) in variances.iter().enumerate() {
            let u = &us[i.min(h - 1)];
            let rows = self.cfg.constraints.as_linear_rows(&xs[i], u)?;
            let mut row = 0;
            let mut step_margins = Vec::with_capacity(specs.len());
            for spec in specs {
                let mut worst: f64 = 0.0;
                for r in row..row + spec.num_entries() {
                    let s: f64 = (0..n).map(|k| rows.a_x[(r, k)].powi(2) * var[k]).sum();
                    worst = worst.max(s.sqrt());
                }
                row += spec.num_entries();
                step_margins.push(z_score * worst);
            }
            margins.push(step_margins);
        }
        Ok((self.cfg.constraints.tighten(&margins)?, Some(variances)))
    }

    fn build_qp(
        &self,
        pred: &CondensedPrediction,
        step: usize,
        sets: &[ConstraintSet],
        guess: &[DVector<f64>],
        slack: bool,
    ) -> Result<QpProblem, ControllerError> {
        let h = self.cfg.horizon;
        let m = self.prior.n_u();
        let nu = h * m;
        let nz = if slack { nu + h } else { nu };

        // Cost.
        let mut hess = DMatrix::zeros(nz, nz);
        let mut grad = DVector::zeros(nz);
        for i in 1..=h {
            let w = if i == h { &self.terminal } else { &self.cfg.q };
            let blk = pred.block(i);
            let err = &pred.free[i] - self.task.x_ref_at(step + i);
            let wb = w * &blk;
            let mut view = hess.view_mut((0, 0), (nu, nu));
            view += blk.transpose() * &wb;
            let mut gview = grad.rows_mut(0, nu);
            gview += wb.transpose() * &err;
        }
        for i in 0..h {
            let mut view = hess.view_mut((i * m, i * m), (m, m));
            view += &self.cfg.r;
            let mut gview = grad.rows_mut(i * m, m);
            gview -= &self.cfg.r * self.task.u_ref_at(step + i);
        }
        if slack {
            for i in 0..h {
                hess[(nu + i, nu + i)] = 1.0;
                grad[nu + i] = self.cfg.slack_penalty;
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;

        // Rows: input boxes, then stage constraints, then slack signs.
        let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
        for i in 0..h {
            for j in 0..m {
                let mut a = DVector::zeros(nz);
                a[i * m + j] = 1.0;
                rows.push((a, self.cfg.input_bounds.lower[j], self.cfg.input_bounds.upper[j]));
            }
        }
        for i in 0..=h {
            let u_bar = &guess[i.min(h - 1)];
            let x_bar = pred.state(i, &DVector::from_iterator(nu, guess.iter().flat_map(|u| u.iter().copied())));
            let lin: LinearRows = sets[i].as_linear_rows(&x_bar, u_bar)?;
            let blk = pred.block(i);
            for r in 0..lin.num_rows() {
                let ax = lin.a_x.row(r);
                let au = lin.a_u.row(r);
                let has_x = ax.iter().any(|&v| v != 0.0);
                let has_u = au.iter().any(|&v| v != 0.0);
                if (i == 0 && !has_u) || (i == h && has_u) {
                    continue;
                }
                let mut a = DVector::zeros(nz);
                let mut coeff = a.rows_mut(0, nu);
                coeff += (ax * &blk).transpose();
                if i < h {
                    let mut ui = a.rows_mut(i * m, m);
                    ui += au.transpose();
                }
                let mut ub = lin.ub[r] - (ax * &pred.free[i])[0];
                if has_x && i > 0 {
                    ub -= self.cfg.backoff;
                    if slack {
                        a[nu + i - 1] = -1.0;
                    }
                }
                rows.push((a, f64::NEG_INFINITY, ub));
            }
        }
        if slack {
            for i in 0..h {
                let mut a = DVector::zeros(nz);
                a[nu + i] = 1.0;
                rows.push((a, 0.0, f64::INFINITY));
            }
        }
        let mut amat = DMatrix::zeros(rows.len(), nz);
        let mut lb = DVector::zeros(rows.len());
        let mut ub = DVector::zeros(rows.len());
        for (r, (a, l, u)) in rows.into_iter().enumerate() {
            amat.set_row(r, &a.transpose());
            lb[r] = l;
            ub[r] = u;
        }
        Ok(QpProblem::new(hess, grad, amat, lb, ub)?)
    }

    /// Solves the hard-constrained QP and falls back to the slack relaxation
    /// when it is not solved.
    fn solve_stage_qp(
        &self,
        pred: &CondensedPrediction,
        step: usize,
        sets: &[ConstraintSet],
        guess: &[DVector<f64>],
    ) -> Result<(Vec<DVector<f64>>, MpcDiagnostics), ControllerError> {
        let h = self.cfg.horizon;
        let m = self.prior.n_u();
        let stacked = DVector::from_iterator(h * m, guess.iter().flat_map(|u| u.iter().copied()));
        let ws = self.cfg.input_bounds.clip_stacked(&stacked);
        let prob = self.build_qp(pred, step, sets, guess, false)?;
        let sol = solve_qp(&prob, Some(&ws))?;
        let mut diag = MpcDiagnostics {
            status: sol.status,
            slack_used: false,
            max_slack: 0.0,
            qp_iterations: sol.iterations,
            sqp_iterations: 0,
        };
        let z = if sol.status == QpStatus::Solved {
            sol.z_star
        } else {
            let prob = self.build_qp(pred, step, sets, guess, true)?;
            let mut ws_slack = DVector::zeros(h * m + h);
            ws_slack.rows_mut(0, h * m).copy_from(&ws);
            let relaxed = solve_qp(&prob, Some(&ws_slack))?;
            diag.status = relaxed.status;
            diag.slack_used = true;
            diag.qp_iterations += relaxed.iterations;
            if relaxed.status == QpStatus::Infeasible {
                ws_slack
            } else {
                diag.max_slack = relaxed.z_star.rows(h * m, h).max().max(0.0);
                relaxed.z_star
            }
        };
        let inputs = (0..h)
            .map(|i| self.cfg.input_bounds.clip(&z.rows(i * m, m).into_owned()))
            .collect();
        Ok((inputs, diag))
    }

    /// Plans from `x_now` with the prior model.
    pub fn solve(&mut self, x_now: &DVector<f64>, step: usize) -> Result<MpcSolution, ControllerError> {
        let prior = self.prior.clone();
        let stage = PriorStage {
            model: &prior,
            dt: self.dt,
            substeps: self.cfg.substeps,
        };
        self.solve_with(x_now, step, &stage, 0.0)
    }

    /// Plans from `x_now` with `model` as the nonlinear predictor. Models
    /// that report variance tighten state constraints by `z_score` standard
    /// deviations; linear mode ignores `model`.
    pub fn solve_with(
        &mut self,
        x_now: &DVector<f64>,
        step: usize,
        model: &dyn StageModel,
        z_score: f64,
    ) -> Result<MpcSolution, ControllerError> {
        check_len("state", x_now, self.prior.n_x())?;
        let h = self.cfg.horizon;
        let mut guess = self.initial_guess(step);
        let solution = match self.cfg.mode {
            MpcMode::Linear => {
                let data = self.linear_stages();
                let pred = condense(x_now, &data.a, &data.b, &data.c);
                let sets = vec![self.cfg.constraints.clone(); h + 1];
                let (inputs, diag) = self.solve_stage_qp(&pred, step, &sets, &guess)?;
                let stacked = DVector::from_iterator(h * inputs[0].len(), inputs.iter().flat_map(|u| u.iter().copied()));
                let states = (0..=h).map(|i| pred.state(i, &stacked)).collect();
                MpcSolution {
                    u0: inputs[0].clone(),
                    inputs,
                    states,
                    variances: None,
                    diagnostics: diag,
                }
            }
            MpcMode::Nonlinear => {
                let mut diag = None;
                for it in 0..self.cfg.sqp_iterations {
                    let (data, xs) = self.nonlinear_stages(model, x_now, &guess)?;
                    let (sets, _) = self.stage_constraints(model, &xs, &guess, z_score)?;
                    let pred = condense(x_now, &data.a, &data.b, &data.c);
                    let (inputs, mut d) = self.solve_stage_qp(&pred, step, &sets, &guess)?;
                    let alpha = self.cfg.step_damping;
                    guess = guess
                        .iter()
                        .zip(&inputs)
                        .map(|(g, u)| if alpha == 1.0 { u.clone() } else { g + (u - g) * alpha })
                        .collect();
                    d.sqp_iterations = it + 1;
                    diag = Some(d);
                }
                let (_, states) = self.nonlinear_stages(model, x_now, &guess)?;
                let (_, variances) = self.stage_constraints(model, &states, &guess, z_score)?;
                let diagnostics = diag.ok_or_else(|| ControllerError::InvalidConfig("no SQP iterations".into()))?;
                MpcSolution {
                    u0: guess[0].clone(),
                    inputs: guess,
                    states,
                    variances,
                    diagnostics,
                }
            }
        };
        self.previous = Some(solution.inputs.clone());
        self.last = Some(solution.clone());
        Ok(solution)
    }
}

impl Controller for MpcController {
    fn act(&mut self, obs: &DVector<f64>, step: usize) -> Result<DVector<f64>, ControllerError> {
        Ok(self.solve(obs, step)?.u0)
    }

    fn reset(&mut self) {
        self.previous = None;
        self.last = None;
    }
}
