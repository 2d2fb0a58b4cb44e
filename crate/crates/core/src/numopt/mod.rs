//! Dense numerical kernels shared by the controllers and filters.
//!
//! Everything here is a pure function of its inputs. Matrices are small
//! (state dimension at most 8, QP sizes in the low hundreds), so all
//! factorizations are dense.

mod chol;
mod expm;
mod qp;
mod riccati;

pub use chol::{chol_solve, JitteredCholesky, JITTER_RETRIES};
pub use expm::{expm, zoh_affine, zoh_discretize};
pub use qp::{solve_qp, solve_qp_with, QpProblem, QpSettings, QpSolution, QpStatus};
pub use riccati::{
    care_residual, dare_residual, is_hurwitz, is_schur_stable, solve_care, solve_continuous_lyapunov,
    solve_dare, RiccatiSolution, RICCATI_TOL,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumoptError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid bounds at row {row}: lower {lower} > upper {upper}")]
    InvalidBounds { row: usize, lower: f64, upper: f64 },
    #[error("pair (A, B) is not stabilizable: {0}")]
    NonStabilizable(String),
    /// The iteration converged, but rounding at this ‖P‖ keeps the residual
    /// above the absolute tolerance.
    #[error("Riccati residual {residual:e} exceeds tolerance {tol:e} (‖P‖ = {p_norm:e})")]
    Inaccurate { residual: f64, tol: f64, p_norm: f64 },
    #[error("matrix is not positive definite after {retries} jitter retries")]
    NotPD { retries: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular linear system: {0}")]
    Singular(String),
}
