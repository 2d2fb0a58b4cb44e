use nalgebra::{DMatrix, DVector};

use super::{FilterError, FilterOutcome, SafetyFilter};
use crate::dynamics::DynamicsModel;
use crate::envs::InputBounds;
use crate::numopt::{solve_qp, QpProblem, QpStatus};

pub const DEFAULT_CBF_GAMMA: f64 = 5.0;
pub const DEFAULT_CBF_PENALTY: f64 = 1e4;
const UNCHANGED_TOL: f64 = 1e-9;

/// Quadratic barrier `h(x) = level − (v − center)ᵀ P (v − center)` over the
/// selected state channels `v`; `h ≥ 0` is the safe set.
#[derive(Debug, Clone, PartialEq)]
pub struct CbfSpec {
    pub selector: Vec<usize>,
    pub p: DMatrix<f64>,
    pub center: DVector<f64>,
    pub level: f64,
    /// Slope of the linear class-K function.
    pub gamma: f64,
    /// Linear cost on the relaxation slack.
    pub penalty: f64,
}

impl CbfSpec {
    pub fn new(selector: Vec<usize>, p: DMatrix<f64>, level: f64) -> Self {
        let k = selector.len();
        Self {
            selector,
            p,
            center: DVector::zeros(k),
            level,
            gamma: DEFAULT_CBF_GAMMA,
            penalty: DEFAULT_CBF_PENALTY,
        }
    }

    /// `limit² − x_i²`: keeps one channel inside `[−limit, limit]`.
    pub fn symmetric_limit(channel: usize, limit: f64) -> Self {
        Self::new(vec![channel], DMatrix::identity(1, 1), limit * limit)
    }

    pub fn validate(&self, n_x: usize) -> Result<(), FilterError> {
        let k = self.selector.len();
        if k == 0 || self.selector.iter().any(|&i| i >= n_x) {
            return Err(FilterError::InvalidConfig(format!("barrier selector {:?}", self.selector)));
        }
        if self.p.nrows() != k || self.p.ncols() != k || self.center.len() != k {
            return Err(FilterError::DimensionMismatch(format!(
                "barrier over {k} channels with a {}x{} matrix and center of length {}",
                self.p.nrows(),
                self.p.ncols(),
                self.center.len()
            )));
        }
        if !(self.gamma > 0.0) || !(self.penalty > 0.0) || !self.level.is_finite() {
            return Err(FilterError::InvalidConfig(format!(
                "gamma {} and penalty {} must be positive",
                self.gamma, self.penalty
            )));
        }
        Ok(())
    }

    fn offset(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.selector.len(), self.selector.iter().map(|&i| x[i])) - &self.center
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let v = self.offset(x);
        self.level - v.dot(&(&self.p * &v))
    }

    /// `∇h` over the full state.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let v = self.offset(x);
        let g = -(&self.p + self.p.transpose()) * v;
        let mut out = DVector::zeros(x.len());
        for (k, &i) in self.selector.iter().enumerate() {
            out[i] += g[k];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbfOutput {
    pub u_safe: DVector<f64>,
    pub modified: bool,
    pub slack: f64,
    pub h: f64,
    /// `ḣ` under the returned input, clipped to the input bounds.
    pub h_dot: f64,
}

/// Minimally changes `u_proposed` so that `ḣ ≥ −γ h` along the prior model.
pub fn cbf_filter(
    spec: &CbfSpec,
    prior: &DynamicsModel,
    bounds: &InputBounds,
    u_proposed: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<CbfOutput, FilterError> {
    spec.validate(prior.n_x())?;
    let m = prior.n_u();
    let zero = DVector::zeros(m);
    let drift = prior.eval(x, &zero)?;
    // Every system is affine in the input, so the input Jacobian is exact.
    let (_, gain) = prior.jacobians(x, &zero)?;
    if u_proposed.len() != m || u_proposed.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::DimensionMismatch(format!("proposed input {u_proposed}")));
    }
    let h = spec.value(x);
    let grad = spec.gradient(x);
    let lf = grad.dot(&drift);
    let lg = gain.transpose() * &grad;
    let rhs = -spec.gamma * h - lf;
    let h_dot = |u: &DVector<f64>| lf + lg.dot(&bounds.clip(u));

    if lg.dot(&bounds.clip(u_proposed)) >= rhs {
        return Ok(CbfOutput {
            u_safe: u_proposed.clone(),
            modified: false,
            slack: 0.0,
            h,
            h_dot: h_dot(u_proposed),
        });
    }

    // Variables [u; s]: min ‖u − u_p‖² + penalty·s + s² with lg·u + s ≥ rhs.
    let nz = m + 1;
    let mut hess = DMatrix::identity(nz, nz) * 2.0;
    hess[(m, m)] = 2.0;
    let mut g = DVector::zeros(nz);
    g.rows_mut(0, m).copy_from(&(u_proposed * -2.0));
    g[m] = spec.penalty;
    let rows = m + 2;
    let mut a = DMatrix::zeros(rows, nz);
    let mut lb = DVector::zeros(rows);
    let mut ub = DVector::zeros(rows);
    for j in 0..m {
        a[(j, j)] = 1.0;
        lb[j] = bounds.lower[j];
        ub[j] = bounds.upper[j];
    }
    for j in 0..m {
        a[(m, j)] = lg[j];
    }
    a[(m, m)] = 1.0;
    lb[m] = rhs;
    ub[m] = f64::INFINITY;
    a[(m + 1, m)] = 1.0;
    lb[m + 1] = 0.0;
    ub[m + 1] = f64::INFINITY;
    let prob = QpProblem::new(hess, g, a, lb, ub)?;
    let sol = solve_qp(&prob, Some(&DVector::from_iterator(nz, bounds.clip(u_proposed).iter().copied().chain([0.0]))))?;
    let mut u = if sol.status == QpStatus::Infeasible {
        bounds.clip(u_proposed)
    } else {
        bounds.clip(&sol.z_star.rows(0, m).into_owned())
    };
    // Remove any residual solver error along the barrier normal.
    let shortfall = rhs - lg.dot(&u);
    let norm2 = lg.norm_squared();
    if shortfall > 0.0 && norm2 > 0.0 {
        u = bounds.clip(&(&u + &lg * (shortfall / norm2)));
    }
    let slack = (rhs - lg.dot(&u)).max(0.0);
    let modified = (&u - u_proposed).amax() > UNCHANGED_TOL;
    let u_safe = if modified { u } else { u_proposed.clone() };
    Ok(CbfOutput {
        h_dot: h_dot(&u_safe),
        u_safe,
        modified,
        slack,
        h,
    })
}

/// [`cbf_filter`] bound to a model and input limits.
#[derive(Debug, Clone)]
pub struct CbfFilter {
    pub spec: CbfSpec,
    pub prior: DynamicsModel,
    pub bounds: InputBounds,
}

impl CbfFilter {
    pub fn new(spec: CbfSpec, prior: DynamicsModel, bounds: InputBounds) -> Result<Self, FilterError> {
        spec.validate(prior.n_x())?;
        if bounds.lower.len() != prior.n_u() || bounds.upper.len() != prior.n_u() {
            return Err(FilterError::DimensionMismatch("input bounds".into()));
        }
        Ok(Self { spec, prior, bounds })
    }
}

impl SafetyFilter for CbfFilter {
    fn filter(&mut self, x: &DVector<f64>, u_proposed: &DVector<f64>, _step: usize) -> Result<FilterOutcome, FilterError> {
        let out = cbf_filter(&self.spec, &self.prior, &self.bounds, u_proposed, x)?;
        Ok(FilterOutcome {
            u_safe: out.u_safe,
            modified: out.modified,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::SystemId;

    fn quad1d() -> (DynamicsModel, InputBounds) {
        let model = DynamicsModel::default_for(SystemId::Quad1D);
        let bounds = InputBounds::default_for(model.params());
        (model, bounds)
    }

    #[test]
    fn interior_state_passes_through() {
        let (model, bounds) = quad1d();
        let spec = CbfSpec::symmetric_limit(1, 1.0);
        let u = model.equilibrium_input() * 1.1;
        let out = cbf_filter(&spec, &model, &bounds, &u, &DVector::from_vec(vec![0.0, 0.1])).unwrap();
        assert!(!out.modified);
        assert_eq!(out.u_safe, u);
    }

    #[test]
    fn boundary_state_stops_outward_push() {
        let (model, bounds) = quad1d();
        let spec = CbfSpec::symmetric_limit(1, 1.0);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let u = DVector::from_element(1, bounds.upper[0]);
        let out = cbf_filter(&spec, &model, &bounds, &u, &x).unwrap();
        assert!(out.modified);
        // ḣ = −2v(u/m − g), evaluated by hand.
        let p = model.params();
        let (m, g) = (p.get("m").unwrap(), p.get("g").unwrap());
        let h_dot = -2.0 * x[1] * (out.u_safe[0] / m - g);
        assert!(h_dot >= -1e-9, "{h_dot}");
        assert!((h_dot - out.h_dot).abs() < 1e-12);
    }

    #[test]
    fn large_gamma_approaches_identity() {
        let (model, bounds) = quad1d();
        let mut spec = CbfSpec::symmetric_limit(1, 1.0);
        spec.gamma = 1e9;
        let x = DVector::from_vec(vec![0.0, 0.9]);
        let u = DVector::from_element(1, bounds.upper[0]);
        let out = cbf_filter(&spec, &model, &bounds, &u, &x).unwrap();
        assert!(!out.modified);
    }

    #[test]
    fn rejects_nonpositive_gamma() {
        let (model, bounds) = quad1d();
        let mut spec = CbfSpec::symmetric_limit(1, 1.0);
        spec.gamma = 0.0;
        assert!(CbfFilter::new(spec, model, bounds).is_err());
    }
}
