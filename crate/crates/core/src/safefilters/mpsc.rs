use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::{FilterError, FilterOutcome, SafetyFilter};
use crate::constraints::{ConstraintSet, LinearRows};
use crate::controllers::{condense, equilibrium_state, CondensedPrediction};
use crate::dynamics::{DynamicsModel, LinearizedModel};
use crate::envs::{InputBounds, TaskSpec};
use crate::numopt::{solve_qp, QpProblem, QpStatus};

pub const DEFAULT_TERMINAL_HALF_WIDTH: f64 = 0.01;
pub const DEFAULT_MPSC_HORIZON: usize = 20;
const UNCHANGED_TOL: f64 = 1e-9;
/// Weight on the later inputs so the plan itself is well posed.
const TAIL_REGULARIZATION: f64 = 1e-6;
/// Path constraints are tightened by this much to absorb solver tolerance.
pub const DEFAULT_MPSC_BACKOFF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct MpscConfig {
    pub horizon: usize,
    pub constraints: ConstraintSet,
    pub input_bounds: InputBounds,
    /// Half-width of the terminal box on every state channel.
    pub terminal_half_width: f64,
    /// Box center; the task equilibrium when `None`.
    pub terminal_center: Option<DVector<f64>>,
    pub slack_penalty: f64,
    pub backoff: f64,
}

impl MpscConfig {
    pub fn new(constraints: ConstraintSet, input_bounds: InputBounds) -> Self {
        Self {
            horizon: DEFAULT_MPSC_HORIZON,
            constraints,
            input_bounds,
            terminal_half_width: DEFAULT_TERMINAL_HALF_WIDTH,
            terminal_center: None,
            slack_penalty: 1e6,
            backoff: DEFAULT_MPSC_BACKOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpscOutput {
    pub u_safe: DVector<f64>,
    pub certified: bool,
    pub backup_used: bool,
    pub modified: bool,
    /// Predicted states of the plan behind `u_safe`; empty on backup.
    pub predicted: Vec<DVector<f64>>,
}

enum Mode {
    /// First input pinned to the proposal.
    Check,
    Project,
    Relaxed,
}

/// Projects proposed inputs onto those with a feasible continuation under
/// the linearized prior that ends in the terminal box.
#[derive(Debug, Clone)]
pub struct MpscFilter {
    cfg: MpscConfig,
    lin: LinearizedModel,
    offset: DVector<f64>,
    rows: LinearRows,
    center: DVector<f64>,
    backup: VecDeque<DVector<f64>>,
}

impl MpscFilter {
    pub fn new(cfg: MpscConfig, prior: &DynamicsModel, task: &TaskSpec, dt: f64) -> Result<Self, FilterError> {
        let (n, m) = (prior.n_x(), prior.n_u());
        if cfg.horizon == 0 {
            return Err(FilterError::InvalidConfig("horizon must be positive".into()));
        }
        if !(cfg.terminal_half_width >= 0.0) || !(cfg.slack_penalty > 0.0) || !(cfg.backoff >= 0.0) {
            return Err(FilterError::InvalidConfig(format!(
                "terminal half-width {}, slack penalty {} and back-off {}",
                cfg.terminal_half_width, cfg.slack_penalty, cfg.backoff
            )));
        }
        if cfg.constraints.n_x() != n || cfg.constraints.n_u() != m {
            return Err(FilterError::DimensionMismatch("constraint set".into()));
        }
        if cfg.input_bounds.lower.len() != m || cfg.input_bounds.upper.len() != m {
            return Err(FilterError::DimensionMismatch("input bounds".into()));
        }
        let x_op = equilibrium_state(prior.system_id(), task.x_ref_at(0));
        let u_op = prior.equilibrium_input();
        let lin = prior.linearize_discrete(&x_op, &u_op, dt)?;
        let offset = &lin.x_ref + &lin.offset - &lin.ad * &lin.x_ref - &lin.bd * &lin.u_ref;
        let rows = cfg.constraints.as_linear_rows(&x_op, &u_op)?;
        let center = cfg.terminal_center.clone().unwrap_or(x_op);
        if center.len() != n {
            return Err(FilterError::DimensionMismatch("terminal center".into()));
        }
        Ok(Self {
            cfg,
            lin,
            offset,
            rows,
            center,
            backup: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &MpscConfig {
        &self.cfg
    }

    fn build(&self, pred: &CondensedPrediction, u_proposed: &DVector<f64>, mode: &Mode) -> Result<QpProblem, FilterError> {
        let h = self.cfg.horizon;
        let m = self.lin.bd.ncols();
        let n = self.lin.ad.nrows();
        let nu = h * m;
        let slack = matches!(mode, Mode::Relaxed);
        let nz = if slack { nu + h } else { nu };

        let mut hess = DMatrix::zeros(nz, nz);
        let mut g = DVector::zeros(nz);
        for j in 0..nu {
            hess[(j, j)] = if j < m { 2.0 } else { 2.0 * TAIL_REGULARIZATION };
        }
        for j in 0..m {
            g[j] = -2.0 * u_proposed[j];
        }
        for i in 1..h {
            for j in 0..m {
                g[i * m + j] = -2.0 * TAIL_REGULARIZATION * self.lin.u_ref[j];
            }
        }
        if slack {
            for i in 0..h {
                hess[(nu + i, nu + i)] = 1.0;
                g[nu + i] = self.cfg.slack_penalty;
            }
        }

        let mut rows: Vec<(DVector<f64>, f64, f64)> = Vec::new();
        for i in 0..h {
            for j in 0..m {
                let mut a = DVector::zeros(nz);
                a[i * m + j] = 1.0;
                let (lo, hi) = if i == 0 && matches!(mode, Mode::Check) {
                    (u_proposed[j], u_proposed[j])
                } else {
                    (self.cfg.input_bounds.lower[j], self.cfg.input_bounds.upper[j])
                };
                rows.push((a, lo, hi));
            }
        }
        let lin = &self.rows;
        for i in 0..=h {
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
        // The terminal box is never relaxed.
        let blk = pred.block(h);
        for k in 0..n {
            let mut a = DVector::zeros(nz);
            a.rows_mut(0, nu).copy_from(&blk.row(k).transpose());
            let base = pred.free[h][k];
            let w = self.cfg.terminal_half_width;
            rows.push((a, self.center[k] - w - base, self.center[k] + w - base));
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
        Ok(QpProblem::new(hess, g, amat, lb, ub)?)
    }

    fn attempt(
        &self,
        pred: &CondensedPrediction,
        u_proposed: &DVector<f64>,
        mode: Mode,
    ) -> Result<Option<Vec<DVector<f64>>>, FilterError> {
        let prob = self.build(pred, u_proposed, &mode)?;
        let sol = solve_qp(&prob, None)?;
        if sol.status != QpStatus::Solved {
            return Ok(None);
        }
        let m = self.lin.bd.ncols();
        Ok(Some(
            (0..self.cfg.horizon)
                .map(|i| sol.z_star.rows(i * m, m).into_owned())
                .collect(),
        ))
    }

    pub fn filter_input(&mut self, x: &DVector<f64>, u_proposed: &DVector<f64>) -> Result<MpscOutput, FilterError> {
        let (n, m) = (self.lin.ad.nrows(), self.lin.bd.ncols());
        if x.len() != n || x.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::DimensionMismatch(format!("state {x}")));
        }
        if u_proposed.len() != m || u_proposed.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::DimensionMismatch(format!("proposed input {u_proposed}")));
        }
        let h = self.cfg.horizon;
        let pred = condense(
            x,
            &vec![self.lin.ad.clone(); h],
            &vec![self.lin.bd.clone(); h],
            &vec![self.offset.clone(); h],
        );
        let states = |plan: &[DVector<f64>]| {
            let stacked = DVector::from_iterator(h * m, plan.iter().flat_map(|u| u.iter().copied()));
            (0..=h).map(|i| pred.state(i, &stacked)).collect::<Vec<_>>()
        };

        let within = &self.cfg.input_bounds.clip(u_proposed) == u_proposed;
        let mut certified = None;
        if within {
            if let Some(mut plan) = self.attempt(&pred, u_proposed, Mode::Check)? {
                plan[0] = u_proposed.clone();
                certified = Some(plan);
            }
        }
        if certified.is_none() {
            certified = self.attempt(&pred, u_proposed, Mode::Project)?;
        }
        if let Some(mut plan) = certified {
            let modified = (&plan[0] - u_proposed).amax() > UNCHANGED_TOL;
            if !modified {
                plan[0] = u_proposed.clone();
            }
            let predicted = states(&plan);
            self.backup = plan.iter().skip(1).cloned().collect();
            return Ok(MpscOutput {
                u_safe: plan[0].clone(),
                certified: true,
                backup_used: false,
                modified,
                predicted,
            });
        }
        if let Some(plan) = self.attempt(&pred, u_proposed, Mode::Relaxed)? {
            let u_safe = self.cfg.input_bounds.clip(&plan[0]);
            return Ok(MpscOutput {
                modified: (&u_safe - u_proposed).amax() > UNCHANGED_TOL,
                predicted: states(&plan),
                u_safe,
                certified: false,
                backup_used: false,
            });
        }
        let u_safe = self
            .backup
            .pop_front()
            .unwrap_or_else(|| self.cfg.input_bounds.clip(&self.lin.u_ref));
        Ok(MpscOutput {
            modified: (&u_safe - u_proposed).amax() > UNCHANGED_TOL,
            u_safe,
            certified: false,
            backup_used: true,
            predicted: Vec::new(),
        })
    }
}

impl SafetyFilter for MpscFilter {
    fn filter(&mut self, x: &DVector<f64>, u_proposed: &DVector<f64>, _step: usize) -> Result<FilterOutcome, FilterError> {
        let out = self.filter_input(x, u_proposed)?;
        Ok(FilterOutcome {
            u_safe: out.u_safe,
            modified: out.modified,
        })
    }

    fn reset(&mut self) {
        self.backup.clear();
    }
}
