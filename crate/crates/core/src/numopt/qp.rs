//! Convex quadratic programs by operator splitting.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ zᵀ H z + gᵀ z
//!     subject to  lb ≤ A z ≤ ub
//! ```
//!
//! with the ADMM iteration popularized by OSQP: Ruiz equilibration of the
//! data, a cached dense Cholesky factor of the reduced KKT matrix, adaptive
//! step size ρ, and a final active-set polish that recovers the exact
//! solution once the active set has been identified.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::NumoptError;

/// Bounds whose magnitude reaches this value are treated as infinite.
const INF_BOUND: f64 = 1e20;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const SCALING_MIN: f64 = 1e-4;
const SCALING_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a: DMatrix<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, NumoptError> {
        let prob = Self { h, g, a, lb, ub };
        prob.validate()?;
        Ok(prob)
    }

    /// A problem without constraint rows.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self, NumoptError> {
        let n = g.len();
        Self::new(h, g, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<(), NumoptError> {
        let n = self.g.len();
        let m = self.a.nrows();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(NumoptError::DimensionMismatch(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.ncols() != n && m > 0 {
            return Err(NumoptError::DimensionMismatch(format!(
                "A has {} columns, expected {n}",
                self.a.ncols()
            )));
        }
        if self.lb.len() != m || self.ub.len() != m {
            return Err(NumoptError::DimensionMismatch(format!(
                "bounds have lengths {}/{}, expected {m}",
                self.lb.len(),
                self.ub.len()
            )));
        }
        for i in 0..m {
            if self.lb[i] > self.ub[i] || self.lb[i].is_nan() || self.ub[i].is_nan() {
                return Err(NumoptError::InvalidBounds {
                    row: i,
                    lower: self.lb[i],
                    upper: self.ub[i],
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    /// Residuals are evaluated every `check_interval` iterations.
    pub check_interval: usize,
    /// ρ is re-estimated every `adaptive_rho_interval` iterations (0 disables).
    pub adaptive_rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_prim_inf: 1e-5,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            check_interval: 5,
            adaptive_rho_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    pub dual: DVector<f64>,
    pub status: QpStatus,
    pub primal_res: f64,
    pub dual_res: f64,
    /// Termination thresholds `eps_abs + eps_rel·scale` the residuals were held to.
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub iterations: usize,
    pub polished: bool,
}

/// Solves `prob` with default settings.
pub fn solve_qp(prob: &QpProblem, warm_start: Option<&DVector<f64>>) -> Result<QpSolution, NumoptError> {
    solve_qp_with(prob, warm_start, &QpSettings::default())
}

/// Solves `prob`. Malformed problems are rejected with an error; numerical
/// outcomes (converged, iteration cap, infeasible) are reported in
/// [`QpSolution::status`].
pub fn solve_qp_with(
    prob: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> Result<QpSolution, NumoptError> {
    prob.validate()?;
    if let Some(ws) = warm_start {
        if ws.len() != prob.num_vars() {
            return Err(NumoptError::DimensionMismatch(format!(
                "warm start has length {}, expected {}",
                ws.len(),
                prob.num_vars()
            )));
        }
    }
    let mut solver = Admm::new(prob, settings)?;
    let mut sol = solver.run(warm_start)?;
    if settings.polish && sol.status == QpStatus::Solved {
        if let Some(polished) = polish(prob, &sol) {
            sol = polished;
        }
    }
    Ok(sol)
}

fn clamp_bound(v: f64) -> f64 {
    v.clamp(-INF_BOUND, INF_BOUND)
}

fn is_inf(v: f64) -> bool {
    v.abs() >= INF_BOUND
}

fn limit_scaling(v: f64) -> f64 {
    if v < SCALING_MIN {
        1.0
    } else {
        v.min(SCALING_MAX)
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

struct Residuals {
    primal: f64,
    dual: f64,
    primal_tol: f64,
    dual_tol: f64,
}

struct Admm<'a> {
    prob: &'a QpProblem,
    settings: &'a QpSettings,
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    rho: f64,
    rho_vec: DVector<f64>,
    kkt: Cholesky<f64, Dyn>,
}

impl<'a> Admm<'a> {
    fn new(prob: &'a QpProblem, settings: &'a QpSettings) -> Result<Self, NumoptError> {
        let n = prob.num_vars();
        let m = prob.num_rows();
        let mut p = prob.h.clone();
        let mut q = prob.g.clone();
        let mut a = if m > 0 { prob.a.clone() } else { DMatrix::zeros(0, n) };
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);

        // Ruiz equilibration of the KKT matrix [[P, Aᵀ], [A, 0]].
        for _ in 0..settings.scaling_iters {
            let dd = DVector::from_fn(n, |j, _| {
                let pn = p.column(j).amax();
                let an = if m > 0 { a.column(j).amax() } else { 0.0 };
                1.0 / limit_scaling(pn.max(an)).sqrt()
            });
            let ee = DVector::from_fn(m, |i, _| 1.0 / limit_scaling(a.row(i).amax()).sqrt());
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dd[i] * dd[j];
                }
                for i in 0..m {
                    a[(i, j)] *= ee[i] * dd[j];
                }
                q[j] *= dd[j];
            }
            d.component_mul_assign(&dd);
            e.component_mul_assign(&ee);
        }

        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            1.0
        };
        let c = 1.0 / limit_scaling(mean_col.max(q.amax()));
        p *= c;
        q *= c;

        let l = DVector::from_fn(m, |i, _| {
            let v = clamp_bound(prob.lb[i]);
            if is_inf(v) {
                v
            } else {
                v * e[i]
            }
        });
        let u = DVector::from_fn(m, |i, _| {
            let v = clamp_bound(prob.ub[i]);
            if is_inf(v) {
                v
            } else {
                v * e[i]
            }
        });

        let rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let rho_vec = Self::rho_vector(&l, &u, rho);
        let kkt = Self::factor(&p, &a, &rho_vec, settings.sigma)?;
        Ok(Self {
            prob,
            settings,
            p,
            q,
            a,
            l,
            u,
            d,
            e,
            c,
            rho,
            rho_vec,
            kkt,
        })
    }

    fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
        DVector::from_fn(l.len(), |i, _| {
            if is_inf(l[i]) && is_inf(u[i]) {
                RHO_MIN
            } else if (u[i] - l[i]).abs() < 1e-4 {
                (RHO_EQ_FACTOR * rho).min(RHO_MAX)
            } else {
                rho
            }
        })
    }

    fn factor(
        p: &DMatrix<f64>,
        a: &DMatrix<f64>,
        rho_vec: &DVector<f64>,
        sigma: f64,
    ) -> Result<Cholesky<f64, Dyn>, NumoptError> {
        let n = p.nrows();
        let mut k = p.clone();
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        if a.nrows() > 0 {
            let mut ra = a.clone();
            for (i, mut row) in ra.row_iter_mut().enumerate() {
                row *= rho_vec[i];
            }
            k += a.transpose() * ra;
        }
        // Symmetrize against round-off in the products above.
        let k = (&k + k.transpose()) * 0.5;
        Cholesky::new(k).ok_or(NumoptError::NotPD { retries: 0 })
    }

    fn residuals(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (Residuals, DVector<f64>, DVector<f64>, DVector<f64>) {
        let prob = self.prob;
        let xo = x.component_mul(&self.d);
        let zo = z.component_div(&self.e);
        let yo = y.component_mul(&self.e) / self.c;
        let px = &prob.h * &xo;
        let (ax, aty) = if prob.num_rows() > 0 {
            (&prob.a * &xo, prob.a.transpose() * &yo)
        } else {
            (DVector::zeros(0), DVector::zeros(xo.len()))
        };
        let primal = inf_norm(&(&ax - &zo));
        let dual = inf_norm(&(&px + &prob.g + &aty));
        let primal_tol = self.settings.eps_abs + self.settings.eps_rel * inf_norm(&ax).max(inf_norm(&zo));
        let dual_tol = self.settings.eps_abs
            + self.settings.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.g));
        (
            Residuals {
                primal,
                dual,
                primal_tol,
                dual_tol,
            },
            xo,
            zo,
            yo,
        )
    }

    fn primal_infeasible(&self, delta_y: &DVector<f64>) -> bool {
        if self.prob.num_rows() == 0 {
            return false;
        }
        let dy = delta_y.component_mul(&self.e);
        let norm = inf_norm(&dy);
        if norm < 1e-30 {
            return false;
        }
        let eps = self.settings.eps_prim_inf * norm;
        if inf_norm(&(self.prob.a.transpose() * &dy)) > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let ub = clamp_bound(self.prob.ub[i]);
            let lb = clamp_bound(self.prob.lb[i]);
            if dy[i] > 0.0 {
                if is_inf(ub) {
                    return false;
                }
                support += ub * dy[i];
            } else if dy[i] < 0.0 {
                if is_inf(lb) {
                    return false;
                }
                support += lb * dy[i];
            }
        }
        support < -eps
    }

    /// Scaled relative residual ratio used for ρ adaptation.
    fn rho_estimate(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        let px = &self.p * x;
        let aty = self.a.transpose() * y;
        let prim = inf_norm(&(&ax - z)) / inf_norm(&ax).max(inf_norm(z)).max(1e-30);
        let dual = inf_norm(&(&px + &self.q + &aty))
            / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q)).max(1e-30);
        (self.rho * (prim / dual.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX)
    }

    fn run(&mut self, warm_start: Option<&DVector<f64>>) -> Result<QpSolution, NumoptError> {
        let n = self.prob.num_vars();
        let m = self.prob.num_rows();
        let s = self.settings;
        let mut x = match warm_start {
            Some(ws) => ws.component_div(&self.d),
            None => DVector::zeros(n),
        };
        let mut z = if m > 0 {
            let ax = &self.a * &x;
            DVector::from_fn(m, |i, _| ax[i].clamp(self.l[i], self.u[i]))
        } else {
            DVector::zeros(0)
        };
        let mut y = DVector::zeros(m);

        let mut last = None;
        for iter in 1..=s.max_iter {
            let mut rhs = &x * s.sigma - &self.q;
            if m > 0 {
                let w = self.rho_vec.component_mul(&z) - &y;
                rhs += self.a.transpose() * w;
            }
            let x_tilde = self.kkt.solve(&rhs);
            let x_new = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let (z_new, y_new) = if m > 0 {
                let z_tilde = &self.a * &x_tilde;
                let z_relax = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
                let z_new = DVector::from_fn(m, |i, _| {
                    (z_relax[i] + y[i] / self.rho_vec[i]).clamp(self.l[i], self.u[i])
                });
                let y_new = &y + self.rho_vec.component_mul(&(&z_relax - &z_new));
                (z_new, y_new)
            } else {
                (z.clone(), y.clone())
            };
            let delta_y = &y_new - &y;
            x = x_new;
            z = z_new;
            y = y_new;

            if iter % s.check_interval.max(1) == 0 || iter == s.max_iter {
                let (res, xo, _zo, yo) = self.residuals(&x, &z, &y);
                if res.primal <= res.primal_tol && res.dual <= res.dual_tol {
                    return Ok(QpSolution {
                        z_star: xo,
                        dual: yo,
                        status: QpStatus::Solved,
                        primal_res: res.primal,
                        dual_res: res.dual,
                        primal_tol: res.primal_tol,
                        dual_tol: res.dual_tol,
                        iterations: iter,
                        polished: false,
                    });
                }
                if self.primal_infeasible(&delta_y) {
                    return Ok(QpSolution {
                        z_star: xo,
                        dual: yo,
                        status: QpStatus::Infeasible,
                        primal_res: res.primal,
                        dual_res: res.dual,
                        primal_tol: res.primal_tol,
                        dual_tol: res.dual_tol,
                        iterations: iter,
                        polished: false,
                    });
                }
                if m > 0 && s.adaptive_rho_interval > 0 && iter % s.adaptive_rho_interval == 0 {
                    let rho_new = self.rho_estimate(&x, &z, &y);
                    if rho_new > 5.0 * self.rho || rho_new < 0.2 * self.rho {
                        self.rho = rho_new;
                        self.rho_vec = Self::rho_vector(&self.l, &self.u, rho_new);
                        self.kkt = Self::factor(&self.p, &self.a, &self.rho_vec, s.sigma)?;
                    }
                }
                last = Some((res, xo, yo, iter));
            }
        }
        let (res, xo, yo, iter) = match last {
            Some(v) => v,
            None => {
                let (res, xo, _, yo) = self.residuals(&x, &z, &y);
                (res, xo, yo, s.max_iter)
            }
        };
        Ok(QpSolution {
            z_star: xo,
            dual: yo,
            status: QpStatus::MaxIter,
            primal_res: res.primal,
            dual_res: res.dual,
            primal_tol: res.primal_tol,
            dual_tol: res.dual_tol,
            iterations: iter,
            polished: false,
        })
    }
}

/// Guesses the active set from the ADMM iterate and solves the resulting
/// equality-constrained KKT system with iterative refinement. Returns `None`
/// when the polished point is not at least as good as the ADMM point.
fn polish(prob: &QpProblem, sol: &QpSolution) -> Option<QpSolution> {
    const DELTA: f64 = 1e-9;
    let n = prob.num_vars();
    let m = prob.num_rows();
    let x = &sol.z_star;
    let y = &sol.dual;
    let ax = if m > 0 { &prob.a * x } else { DVector::zeros(0) };

    // (row, bound value, upper side?)
    let mut active: Vec<(usize, f64, bool)> = Vec::new();
    for i in 0..m {
        let lb = clamp_bound(prob.lb[i]);
        let ub = clamp_bound(prob.ub[i]);
        let z = ax[i].clamp(lb, ub);
        let lower = !is_inf(lb) && z - lb < -y[i];
        let upper = !is_inf(ub) && ub - z < y[i];
        if lower && upper {
            active.push((i, if y[i] >= 0.0 { ub } else { lb }, y[i] >= 0.0));
        } else if upper {
            active.push((i, ub, true));
        } else if lower {
            active.push((i, lb, false));
        }
    }
    let k = active.len();
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.h);
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -prob.g[j];
    }
    for (r, &(row, b, _)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(row, j)];
            kkt[(j, n + r)] = prob.a[(row, j)];
        }
        rhs[n + r] = b;
    }
    let mut reg = kkt.clone();
    for i in 0..n {
        reg[(i, i)] += DELTA;
    }
    for i in n..dim {
        reg[(i, i)] -= DELTA;
    }
    let lu = reg.lu();
    let mut sol_vec = lu.solve(&rhs)?;
    for _ in 0..5 {
        let r = &rhs - &kkt * &sol_vec;
        if inf_norm(&r) < 1e-15 * (1.0 + inf_norm(&rhs)) {
            break;
        }
        sol_vec += lu.solve(&r)?;
    }
    if sol_vec.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol_vec.rows(0, n).into_owned();
    let mut yp = DVector::zeros(m);
    for (r, &(row, _, upper)) in active.iter().enumerate() {
        let v = sol_vec[n + r];
        // Multiplier signs must match the side that was guessed active.
        let sign_tol = 1e-9 * (1.0 + v.abs());
        if (upper && v < -sign_tol) || (!upper && v > sign_tol) {
            return None;
        }
        yp[row] = v;
    }
    let axp = if m > 0 { &prob.a * &xp } else { DVector::zeros(0) };
    let zp = DVector::from_fn(m, |i, _| axp[i].clamp(clamp_bound(prob.lb[i]), clamp_bound(prob.ub[i])));
    let px = &prob.h * &xp;
    let aty = if m > 0 { prob.a.transpose() * &yp } else { DVector::zeros(n) };
    let primal = inf_norm(&(&axp - &zp));
    let dual = inf_norm(&(&px + &prob.g + &aty));
    if primal <= sol.primal_res.max(1e-12) && dual <= sol.dual_res.max(1e-12) {
        Some(QpSolution {
            z_star: xp,
            dual: yp,
            status: QpStatus::Solved,
            primal_res: primal,
            dual_res: dual,
            primal_tol: sol.primal_tol,
            dual_tol: sol.dual_tol,
            iterations: sol.iterations,
            polished: true,
        })
    } else {
        None
    }
}
