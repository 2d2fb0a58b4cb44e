use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::FilterError;
use crate::numopt::JitteredCholesky;

/// Transitions kept for fitting.
pub const DEFAULT_RESERVOIR: usize = 200;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Squared-exponential ARD hyperparameters of one output, in normalized input units.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn isotropic(dim: usize, signal_var: f64, lengthscale: f64, noise_var: f64) -> Self {
        Self {
            signal_var,
            lengthscales: vec![lengthscale; dim],
            noise_var,
        }
    }

    /// `[ln σ_f², ln ℓ₁, …, ln ℓ_d, ln σ_n²]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.signal_var.ln()];
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v.push(self.noise_var.ln());
        v
    }

    pub fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            signal_var: v[0].exp(),
            lengthscales: v[1..=d].iter().map(|x| x.exp()).collect(),
            noise_var: v[d + 1].exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpSettings {
    pub optimize: bool,
    /// Lengthscale at which each optimization start is initialized.
    pub start_lengthscales: Vec<f64>,
    pub max_iter: usize,
    pub min_noise_var: f64,
    /// Hyperparameters used when `optimize` is off, or when targets are constant.
    pub fixed: Option<GpHyper>,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            optimize: true,
            start_lengthscales: vec![0.5, 1.0, 2.0],
            max_iter: 60,
            min_noise_var: 1e-10,
            fixed: None,
        }
    }
}

fn sq_dist_scaled(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum()
}

fn kernel_matrix(z: &DMatrix<f64>, hyper: &GpHyper) -> DMatrix<f64> {
    let n = z.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        hyper.signal_var * (-0.5 * sq_dist_scaled(&rows[i], &rows[j], &hyper.lengthscales)).exp()
    })
}

/// Log marginal likelihood of targets `y` at (normalized) inputs `z`, and its
/// gradient with respect to [`GpHyper::to_log`].
pub fn log_marginal_likelihood(z: &DMatrix<f64>, y: &DVector<f64>, hyper: &GpHyper) -> Result<(f64, Vec<f64>), FilterError> {
    let n = z.nrows();
    let d = z.ncols();
    if y.len() != n || hyper.lengthscales.len() != d {
        return Err(FilterError::DimensionMismatch(format!(
            "{n} inputs of dimension {d}, {} targets, {} lengthscales",
            y.len(),
            hyper.lengthscales.len()
        )));
    }
    let kf = kernel_matrix(z, hyper);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hyper.noise_var;
    }
    let chol = JitteredCholesky::new(&k)?;
    let alpha = chol.factor.solve(y);
    let lml = -0.5 * y.dot(&alpha) - 0.5 * chol.ln_determinant() - 0.5 * n as f64 * LN_2PI;

    let kinv = chol.factor.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = Vec::with_capacity(d + 2);
    grad.push(0.5 * w.component_mul(&kf).sum());
    for (dim, l) in hyper.lengthscales.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = z[(i, dim)] - z[(j, dim)];
                acc += w[(i, j)] * kf[(i, j)] * diff * diff / (l * l);
            }
        }
        grad.push(0.5 * acc);
    }
    grad.push(0.5 * hyper.noise_var * w.trace());
    Ok((lml, grad))
}

/// Bounded gradient ascent in log space with an adaptive step.
fn optimize_hyper(z: &DMatrix<f64>, y: &DVector<f64>, start: GpHyper, settings: &GpSettings) -> Option<(f64, GpHyper)> {
    let lo_noise = settings.min_noise_var.ln();
    let clamp = |v: &mut Vec<f64>| {
        let last = v.len() - 1;
        for (i, x) in v.iter_mut().enumerate() {
            let (lo, hi) = if i == last { (lo_noise, 5.0) } else { (-12.0, 8.0) };
            *x = x.clamp(lo, hi);
        }
    };
    let mut theta = start.to_log();
    clamp(&mut theta);
    let (mut best, mut grad) = log_marginal_likelihood(z, y, &GpHyper::from_log(&theta)).ok()?;
    let mut step = 0.5;
    for _ in 0..settings.max_iter {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < 1e-8 || step < 1e-8 {
            break;
        }
        let mut cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g / norm).collect();
        clamp(&mut cand);
        match log_marginal_likelihood(z, y, &GpHyper::from_log(&cand)) {
            Ok((val, g)) if val > best => {
                theta = cand;
                best = val;
                grad = g;
                step *= 1.5;
            }
            _ => step *= 0.5,
        }
    }
    Some((best, GpHyper::from_log(&theta)))
}

#[derive(Debug, Clone, PartialEq)]
struct OutputFit {
    hyper: GpHyper,
    alpha: DVector<f64>,
    /// Lower Cholesky factor of `K + σ_n² I` (plus any jitter).
    chol_l: DMatrix<f64>,
}

/// Independent GPs per output over normalized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    input_dim: usize,
    output_dim: usize,
    mean: DVector<f64>,
    scale: DVector<f64>,
    /// Normalized training inputs, one per row.
    z: DMatrix<f64>,
    outputs: Vec<OutputFit>,
}

impl GpModel {
    /// A model without data: zero mean and zero variance everywhere.
    pub fn empty(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            mean: DVector::zeros(input_dim),
            scale: DVector::from_element(input_dim, 1.0),
            z: DMatrix::zeros(0, input_dim),
            outputs: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_samples(&self) -> usize {
        self.z.nrows()
    }

    pub fn hyperparameters(&self) -> Vec<GpHyper> {
        self.outputs.iter().map(|o| o.hyper.clone()).collect()
    }

    /// Fits one GP per target dimension.
    pub fn fit(inputs: &[DVector<f64>], targets: &[DVector<f64>], settings: &GpSettings) -> Result<Self, FilterError> {
        if inputs.len() < 2 || inputs.len() != targets.len() {
            return Err(FilterError::InvalidConfig(format!(
                "need at least two matching samples, got {} inputs and {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let d = inputs[0].len();
        let p = targets[0].len();
        if inputs.iter().any(|z| z.len() != d) || targets.iter().any(|y| y.len() != p) {
            return Err(FilterError::DimensionMismatch("ragged training data".into()));
        }
        if inputs.iter().chain(targets).any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(FilterError::InvalidConfig("training data is not finite".into()));
        }
        let n = inputs.len();
        let nf = n as f64;
        let mean = inputs.iter().fold(DVector::zeros(d), |acc, z| acc + z) / nf;
        let scale = DVector::from_fn(d, |k, _| {
            let var = inputs.iter().map(|z| (z[k] - mean[k]).powi(2)).sum::<f64>() / nf;
            if var.sqrt() > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        });
        let z = DMatrix::from_fn(n, d, |i, k| (inputs[i][k] - mean[k]) / scale[k]);

        let mut outputs = Vec::with_capacity(p);
        for j in 0..p {
            let y = DVector::from_iterator(n, targets.iter().map(|t| t[j]));
            let y_var = y.iter().map(|v| v * v).sum::<f64>() / nf;
            let hyper = match (&settings.fixed, settings.optimize && y_var > 0.0) {
                (_, true) => {
                    let mut best: Option<(f64, GpHyper)> = None;
                    for &l in &settings.start_lengthscales {
                        let start = GpHyper::isotropic(d, y_var, l, (1e-2 * y_var).max(settings.min_noise_var));
                        if let Some((val, h)) = optimize_hyper(&z, &y, start, settings) {
                            if best.as_ref().is_none_or(|(b, _)| val > *b) {
                                best = Some((val, h));
                            }
                        }
                    }
                    best.map(|(_, h)| h)
                        .ok_or_else(|| FilterError::InvalidConfig("no optimization start succeeded".into()))?
                }
                (Some(h), false) => h.clone(),
                (None, false) => GpHyper::isotropic(d, y_var.max(1e-12), 1.0, (1e-2 * y_var).max(settings.min_noise_var)),
            };
            if hyper.lengthscales.len() != d {
                return Err(FilterError::DimensionMismatch("fixed lengthscales".into()));
            }
            let mut k = kernel_matrix(&z, &hyper);
            for i in 0..n {
                k[(i, i)] += hyper.noise_var;
            }
            let chol = JitteredCholesky::new(&k)?;
            let alpha = chol.factor.solve(&y);
            outputs.push(OutputFit {
                hyper,
                alpha,
                chol_l: chol.factor.l(),
            });
        }
        Ok(Self {
            input_dim: d,
            output_dim: p,
            mean,
            scale,
            z,
            outputs,
        })
    }

    fn normalize(&self, q: &DVector<f64>) -> Vec<f64> {
        (0..self.input_dim).map(|k| (q[k] - self.mean[k]) / self.scale[k]).collect()
    }

    fn cross_kernel(&self, qn: &[f64], hyper: &GpHyper) -> DVector<f64> {
        DVector::from_fn(self.z.nrows(), |i, _| {
            let row: Vec<f64> = self.z.row(i).iter().copied().collect();
            hyper.signal_var * (-0.5 * sq_dist_scaled(qn, &row, &hyper.lengthscales)).exp()
        })
    }

    /// Posterior mean and latent variance per output.
    pub fn predict(&self, q: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        if self.is_empty() {
            return (DVector::zeros(self.output_dim), DVector::zeros(self.output_dim));
        }
        let qn = self.normalize(q);
        let mut mean = DVector::zeros(self.output_dim);
        let mut var = DVector::zeros(self.output_dim);
        for (j, out) in self.outputs.iter().enumerate() {
            let ks = self.cross_kernel(&qn, &out.hyper);
            mean[j] = ks.dot(&out.alpha);
            let v = out
                .chol_l
                .solve_lower_triangular(&ks)
                .unwrap_or_else(|| DVector::zeros(ks.len()));
            var[j] = (out.hyper.signal_var - v.dot(&v)).max(0.0);
        }
        (mean, var)
    }

    /// Jacobian of the posterior mean with respect to the raw input.
    pub fn mean_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.output_dim, self.input_dim);
        if self.is_empty() {
            return jac;
        }
        let qn = self.normalize(q);
        for (j, out) in self.outputs.iter().enumerate() {
            let ks = self.cross_kernel(&qn, &out.hyper);
            for k in 0..self.input_dim {
                let l2 = out.hyper.lengthscales[k].powi(2);
                let s: f64 = (0..self.z.nrows())
                    .map(|i| out.alpha[i] * ks[i] * (self.z[(i, k)] - qn[k]) / l2)
                    .sum();
                jac[(j, k)] = s / self.scale[k];
            }
        }
        jac
    }
}

/// Sliding window over the most recent transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBuffer {
    capacity: usize,
    inputs: VecDeque<DVector<f64>>,
    targets: VecDeque<DVector<f64>>,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inputs: VecDeque::new(),
            targets: VecDeque::new(),
        }
    }

    pub fn push(&mut self, input: DVector<f64>, target: DVector<f64>) {
        if self.inputs.len() == self.capacity {
            self.inputs.pop_front();
            self.targets.pop_front();
        }
        self.inputs.push_back(input);
        self.targets.push_back(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> Vec<DVector<f64>> {
        self.inputs.iter().cloned().collect()
    }

    pub fn targets(&self) -> Vec<DVector<f64>> {
        self.targets.iter().cloned().collect()
    }

    pub fn fit(&self, settings: &GpSettings) -> Result<GpModel, FilterError> {
        GpModel::fit(&self.inputs(), &self.targets(), settings)
    }
}

impl Default for TransitionBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_RESERVOIR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let xs: Vec<_> = (0..5).map(|i| v(&[i as f64])).collect();
        let ys = vec![v(&[0.0]); 5];
        let gp = GpModel::fit(&xs, &ys, &GpSettings::default()).unwrap();
        for q in [-3.0, 0.5, 2.2, 10.0] {
            assert_eq!(gp.predict(&v(&[q])).0[0], 0.0);
        }
    }

    #[test]
    fn duplicated_point_interpolates() {
        // Two coincident samples act as one effective point.
        let xs = vec![v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[5.0, 5.0])];
        let ys = vec![v(&[1.0]), v(&[1.0]), v(&[0.0])];
        let settings = GpSettings {
            optimize: false,
            fixed: Some(GpHyper::isotropic(2, 1.0, 0.3, 1e-12)),
            ..GpSettings::default()
        };
        let gp = GpModel::fit(&xs, &ys, &settings).unwrap();
        let (m, s) = gp.predict(&v(&[0.0, 0.0]));
        assert!((m[0] - 1.0).abs() < 1e-6);
        assert!(s[0] < 1e-6);
    }

    #[test]
    fn far_queries_revert_to_prior() {
        let xs: Vec<_> = (0..10).map(|i| v(&[i as f64 * 0.1])).collect();
        let ys: Vec<_> = xs.iter().map(|x| v(&[x[0].sin()])).collect();
        let settings = GpSettings {
            optimize: false,
            fixed: Some(GpHyper::isotropic(1, 0.7, 0.5, 1e-4)),
            ..GpSettings::default()
        };
        let gp = GpModel::fit(&xs, &ys, &settings).unwrap();
        // The normalized input scale is about 0.29, so 10 lengthscales ≈ 1.5 raw units.
        let (m, s) = gp.predict(&v(&[0.45 + 20.0 * 0.5 * 0.29]));
        assert!(m[0].abs() < 1e-6);
        assert!((s[0] / 0.7 - 1.0).abs() < 0.01);
    }

    #[test]
    fn buffer_keeps_most_recent() {
        let mut buf = TransitionBuffer::new(3);
        for i in 0..5 {
            buf.push(v(&[i as f64]), v(&[0.0]));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.inputs()[0][0], 2.0);
    }

    #[test]
    fn empty_model_is_silent() {
        let gp = GpModel::empty(3, 2);
        let (m, s) = gp.predict(&v(&[1.0, 2.0, 3.0]));
        assert_eq!(m, DVector::zeros(2));
        assert_eq!(s, DVector::zeros(2));
        assert_eq!(gp.mean_jacobian(&v(&[1.0, 2.0, 3.0])), DMatrix::zeros(2, 3));
    }
}
