//! State and input constraints `c(x, u) ≤ 0`.
//!
//! A positive value is a violation. Each [`ConstraintSpec`] contributes one or
//! more scalar entries to the evaluated vector, always in the same order:
//! linear forms one per row, bounds an upper entry then a lower entry per
//! selected channel (missing sides are skipped), quadratic forms exactly one.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// A step counts as violating when any constraint value exceeds this.
pub const VIOLATION_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("selector index {index} out of range for a vector of length {len}")]
    SelectorOutOfRange { index: usize, len: usize },
    #[error("bound lower {lower} exceeds upper {upper} on channel {channel}")]
    InvertedBound { channel: usize, lower: f64, upper: f64 },
    #[error("quadratic form matrix is not positive semidefinite")]
    NotPsd,
    #[error("negative tightening margin {0}")]
    NegativeMargin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintTarget {
    State,
    Input,
    /// The stacked vector `[x; u]`.
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintForm {
    /// `A v ≤ b`.
    Linear { a: DMatrix<f64>, b: DVector<f64> },
    /// `lower ≤ v ≤ upper`, either side optional.
    Bound {
        lower: Option<DVector<f64>>,
        upper: Option<DVector<f64>>,
    },
    /// `vᵀ P v ≤ r`.
    Quadratic { p: DMatrix<f64>, r: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub form: ConstraintForm,
    pub target: ConstraintTarget,
    /// Indices into the target vector; `v` is the selected sub-vector.
    pub selector: Vec<usize>,
    /// Added to every entry of this spec; positive values shrink the feasible set.
    pub margin: f64,
}

impl ConstraintSpec {
    pub fn new(form: ConstraintForm, target: ConstraintTarget, selector: Vec<usize>) -> Self {
        Self {
            form,
            target,
            selector,
            margin: 0.0,
        }
    }

    /// `lower ≤ v ≤ upper` on state channels.
    pub fn state_bound(selector: Vec<usize>, lower: Option<Vec<f64>>, upper: Option<Vec<f64>>) -> Self {
        Self::new(
            ConstraintForm::Bound {
                lower: lower.map(DVector::from_vec),
                upper: upper.map(DVector::from_vec),
            },
            ConstraintTarget::State,
            selector,
        )
    }

    pub fn input_bound(selector: Vec<usize>, lower: Option<Vec<f64>>, upper: Option<Vec<f64>>) -> Self {
        Self {
            target: ConstraintTarget::Input,
            ..Self::state_bound(selector, lower, upper)
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    /// Number of scalar entries this spec contributes.
    pub fn num_entries(&self) -> usize {
        match &self.form {
            ConstraintForm::Linear { b, .. } => b.len(),
            ConstraintForm::Bound { lower, upper } => {
                lower.as_ref().map_or(0, |v| v.len()) + upper.as_ref().map_or(0, |v| v.len())
            }
            ConstraintForm::Quadratic { .. } => 1,
        }
    }

    fn target_len(&self, n_x: usize, n_u: usize) -> usize {
        match self.target {
            ConstraintTarget::State => n_x,
            ConstraintTarget::Input => n_u,
            ConstraintTarget::Both => n_x + n_u,
        }
    }

    fn validate(&self, n_x: usize, n_u: usize) -> Result<(), ConstraintError> {
        let len = self.target_len(n_x, n_u);
        if let Some(&index) = self.selector.iter().find(|&&i| i >= len) {
            return Err(ConstraintError::SelectorOutOfRange { index, len });
        }
        let s = self.selector.len();
        let mismatch = |what: &str, got: usize| {
            Err(ConstraintError::DimensionMismatch(format!(
                "{what} has size {got}, selector has {s} entries"
            )))
        };
        match &self.form {
            ConstraintForm::Linear { a, b } => {
                if a.ncols() != s {
                    return mismatch("linear matrix column count", a.ncols());
                }
                if a.nrows() != b.len() {
                    return Err(ConstraintError::DimensionMismatch(format!(
                        "linear matrix has {} rows but right-hand side has {}",
                        a.nrows(),
                        b.len()
                    )));
                }
            }
            ConstraintForm::Bound { lower, upper } => {
                for side in [lower, upper].into_iter().flatten() {
                    if side.len() != s {
                        return mismatch("bound vector", side.len());
                    }
                }
                if let (Some(lo), Some(hi)) = (lower, upper) {
                    for (channel, (&l, &u)) in lo.iter().zip(hi.iter()).enumerate() {
                        if l > u {
                            return Err(ConstraintError::InvertedBound {
                                channel,
                                lower: l,
                                upper: u,
                            });
                        }
                    }
                }
            }
            ConstraintForm::Quadratic { p, .. } => {
                if p.nrows() != s || p.ncols() != s {
                    return mismatch("quadratic matrix", p.nrows());
                }
                let sym = (p + p.transpose()) * 0.5;
                let min_eig = sym.symmetric_eigenvalues().min();
                if min_eig < -1e-12 * sym.amax().max(1.0) {
                    return Err(ConstraintError::NotPsd);
                }
            }
        }
        if self.margin < 0.0 {
            return Err(ConstraintError::NegativeMargin(self.margin));
        }
        Ok(())
    }

    fn select(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n_x = x.len();
        DVector::from_iterator(
            self.selector.len(),
            self.selector.iter().map(|&i| match self.target {
                ConstraintTarget::State => x[i],
                ConstraintTarget::Input => u[i],
                ConstraintTarget::Both if i < n_x => x[i],
                ConstraintTarget::Both => u[i - n_x],
            }),
        )
    }

    fn evaluate_into(&self, x: &DVector<f64>, u: &DVector<f64>, out: &mut Vec<f64>) {
        let v = self.select(x, u);
        match &self.form {
            ConstraintForm::Linear { a, b } => {
                out.extend((a * &v - b).iter().map(|c| c + self.margin));
            }
            ConstraintForm::Bound { lower, upper } => {
                for i in 0..v.len() {
                    if let Some(hi) = upper {
                        out.push(v[i] - hi[i] + self.margin);
                    }
                    if let Some(lo) = lower {
                        out.push(lo[i] - v[i] + self.margin);
                    }
                }
            }
            ConstraintForm::Quadratic { p, r } => {
                out.push(v.dot(&(p * &v)) - r + self.margin);
            }
        }
    }

    /// Scatters a row over the selected sub-vector into `(x, u)` coefficients.
    fn scatter(&self, coeffs: &[f64], n_x: usize, n_u: usize) -> (DVector<f64>, DVector<f64>) {
        let mut cx = DVector::zeros(n_x);
        let mut cu = DVector::zeros(n_u);
        for (&idx, &c) in self.selector.iter().zip(coeffs) {
            match self.target {
                ConstraintTarget::State => cx[idx] += c,
                ConstraintTarget::Input => cu[idx] += c,
                ConstraintTarget::Both if idx < n_x => cx[idx] += c,
                ConstraintTarget::Both => cu[idx - n_x] += c,
            }
        }
        (cx, cu)
    }
}

/// Rows `a_x x + a_u u ≤ ub`, one per evaluated constraint entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRows {
    pub a_x: DMatrix<f64>,
    pub a_u: DMatrix<f64>,
    pub ub: DVector<f64>,
}

impl LinearRows {
    pub fn num_rows(&self) -> usize {
        self.ub.len()
    }

    /// `a_x x + a_u u − ub`, comparable entrywise with [`ConstraintSet::evaluate`].
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a_x * x + &self.a_u * u - &self.ub
    }

    /// Rows that involve the state (input-only rows dropped).
    pub fn state_rows(&self) -> Vec<usize> {
        (0..self.num_rows())
            .filter(|&r| self.a_x.row(r).iter().any(|&v| v != 0.0))
            .collect()
    }
}

/// Ordered list of constraint specs for a system with `n_x` states and `n_u` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    specs: Vec<ConstraintSpec>,
    n_x: usize,
    n_u: usize,
}

impl ConstraintSet {
    pub fn new(specs: Vec<ConstraintSpec>, n_x: usize, n_u: usize) -> Result<Self, ConstraintError> {
        for spec in &specs {
            spec.validate(n_x, n_u)?;
        }
        Ok(Self { specs, n_x, n_u })
    }

    pub fn empty(n_x: usize, n_u: usize) -> Self {
        Self {
            specs: Vec::new(),
            n_x,
            n_u,
        }
    }

    pub fn specs(&self) -> &[ConstraintSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Total number of scalar entries produced by [`Self::evaluate`].
    pub fn num_entries(&self) -> usize {
        self.specs.iter().map(ConstraintSpec::num_entries).sum()
    }

    /// Subset containing only specs that involve the state.
    pub fn state_specs(&self) -> Self {
        Self {
            specs: self
                .specs
                .iter()
                .filter(|s| s.target != ConstraintTarget::Input)
                .cloned()
                .collect(),
            n_x: self.n_x,
            n_u: self.n_u,
        }
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), ConstraintError> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(ConstraintError::DimensionMismatch(format!(
                "got state {} and input {}, expected {} and {}",
                x.len(),
                u.len(),
                self.n_x,
                self.n_u
            )));
        }
        Ok(())
    }

    /// Constraint values with margins applied; `≤ 0` means satisfied.
    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        self.check(x, u)?;
        let mut out = Vec::with_capacity(self.num_entries());
        for spec in &self.specs {
            spec.evaluate_into(x, u, &mut out);
        }
        Ok(DVector::from_vec(out))
    }

    /// Linear rows for QP embedding. Linear and bound forms are exact; each
    /// quadratic form is replaced by its tangent at `(x_bar, u_bar)`.
    pub fn as_linear_rows(&self, x_bar: &DVector<f64>, u_bar: &DVector<f64>) -> Result<LinearRows, ConstraintError> {
        self.check(x_bar, u_bar)?;
        let m = self.num_entries();
        let mut a_x = DMatrix::zeros(m, self.n_x);
        let mut a_u = DMatrix::zeros(m, self.n_u);
        let mut ub = DVector::zeros(m);
        let mut row = 0;
        let mut put = |cx: DVector<f64>, cu: DVector<f64>, bound: f64| {
            a_x.set_row(row, &cx.transpose());
            a_u.set_row(row, &cu.transpose());
            ub[row] = bound;
            row += 1;
        };
        for spec in &self.specs {
            match &spec.form {
                ConstraintForm::Linear { a, b } => {
                    for r in 0..a.nrows() {
                        let coeffs: Vec<f64> = a.row(r).iter().copied().collect();
                        let (cx, cu) = spec.scatter(&coeffs, self.n_x, self.n_u);
                        put(cx, cu, b[r] - spec.margin);
                    }
                }
                ConstraintForm::Bound { lower, upper } => {
                    let s = spec.selector.len();
                    for i in 0..s {
                        let mut unit = vec![0.0; s];
                        unit[i] = 1.0;
                        if let Some(hi) = upper {
                            let (cx, cu) = spec.scatter(&unit, self.n_x, self.n_u);
                            put(cx, cu, hi[i] - spec.margin);
                        }
                        if let Some(lo) = lower {
                            unit[i] = -1.0;
                            let (cx, cu) = spec.scatter(&unit, self.n_x, self.n_u);
                            put(cx, cu, -lo[i] - spec.margin);
                        }
                    }
                }
                ConstraintForm::Quadratic { p, r } => {
                    let v_bar = spec.select(x_bar, u_bar);
                    let sym = (p + p.transpose()) * 0.5;
                    let grad = &sym * &v_bar * 2.0;
                    let c_bar = v_bar.dot(&(&sym * &v_bar)) - r;
                    let (cx, cu) = spec.scatter(grad.as_slice(), self.n_x, self.n_u);
                    put(cx, cu, grad.dot(&v_bar) - c_bar - spec.margin);
                }
            }
        }
        Ok(LinearRows { a_x, a_u, ub })
    }

    /// One copy per step with `margins[i][j]` added to spec `j`'s margin.
    pub fn tighten(&self, margins: &[Vec<f64>]) -> Result<Vec<ConstraintSet>, ConstraintError> {
        margins
            .iter()
            .map(|step| {
                if step.len() != self.specs.len() {
                    return Err(ConstraintError::DimensionMismatch(format!(
                        "{} margins for {} constraint specs",
                        step.len(),
                        self.specs.len()
                    )));
                }
                let specs = self
                    .specs
                    .iter()
                    .zip(step)
                    .map(|(spec, &m)| {
                        if m < 0.0 || m.is_nan() {
                            return Err(ConstraintError::NegativeMargin(m));
                        }
                        Ok(spec.clone().with_margin(spec.margin + m))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(ConstraintSet {
                    specs,
                    n_x: self.n_x,
                    n_u: self.n_u,
                })
            })
            .collect()
    }
}

/// Violation predicate shared by step info and metrics.
pub fn is_violation(values: &DVector<f64>) -> bool {
    values.iter().any(|&c| c > VIOLATION_TOL)
}
