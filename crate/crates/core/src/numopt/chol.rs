use nalgebra::{Cholesky, DMatrix, Dyn};

use super::NumoptError;

/// Number of jitter escalations attempted after the plain factorization fails.
pub const JITTER_RETRIES: usize = 5;

/// Cholesky factor of `M + jitter·I`, where `jitter` is the smallest rung of
/// the ladder `1e-10·trace(M)/n · 10^k` that made the factorization succeed
/// (zero when `M` factored as given).
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn new(m: &DMatrix<f64>) -> Result<Self, NumoptError> {
        if m.nrows() != m.ncols() {
            return Err(NumoptError::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if let Some(factor) = Cholesky::new(m.clone()) {
            return Ok(Self { factor, jitter: 0.0 });
        }
        let n = m.nrows().max(1) as f64;
        let base = (m.trace().abs() / n).max(f64::MIN_POSITIVE) * 1e-10;
        let mut jitter = base;
        for _ in 0..JITTER_RETRIES {
            let mut shifted = m.clone();
            for i in 0..m.nrows() {
                shifted[(i, i)] += jitter;
            }
            if let Some(factor) = Cholesky::new(shifted) {
                return Ok(Self { factor, jitter });
            }
            jitter *= 10.0;
        }
        Err(NumoptError::NotPD {
            retries: JITTER_RETRIES,
        })
    }

    pub fn solve(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(y)
    }

    /// log det(M + jitter·I).
    pub fn ln_determinant(&self) -> f64 {
        2.0 * self.factor.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves `M X = Y` for symmetric positive definite `M`.
pub fn chol_solve(m: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError> {
    if y.nrows() != m.nrows() {
        return Err(NumoptError::DimensionMismatch(format!(
            "right-hand side has {} rows, expected {}",
            y.nrows(),
            m.nrows()
        )));
    }
    Ok(JitteredCholesky::new(m)?.solve(y))
}
