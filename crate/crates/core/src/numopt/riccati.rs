//! Algebraic Riccati equations for LQR synthesis.
//!
//! * CARE: Kleinman–Newton iteration from a stabilizing initial gain.
//! * DARE: structure-preserving doubling (an accelerated fixed-point
//!   iteration) followed by Hewer refinement steps.
//!
//! Both finish with Newton steps in defect-correction form, which keeps the
//! residual near the cost of evaluating it even when ‖P‖ is large.
//!
//! Lyapunov and Stein equations are solved through their Kronecker forms,
//! which is adequate for the state dimensions used here (n ≤ 8).

use nalgebra::linalg::Schur;
use nalgebra::{Cholesky, DMatrix};

use super::NumoptError;

/// Frobenius-norm bound on the Riccati residual of an accepted solution.
pub const RICCATI_TOL: f64 = 1e-9;

const MAX_NEWTON_ITERS: usize = 100;
const MAX_CORRECTION_STEPS: usize = 4;
const MAX_DOUBLING_ITERS: usize = 200;
/// Doubling iterates growing past this norm indicate a non-stabilizable pair.
const DIVERGENCE_NORM: f64 = 1e14;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual_norm: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigenvalues(a: &DMatrix<f64>) -> Option<Vec<(f64, f64)>> {
    if a.nrows() == 0 {
        return Some(Vec::new());
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000)?;
    Some(schur.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect())
}

/// All eigenvalues strictly in the open left half-plane.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    eigenvalues(a).is_some_and(|ev| ev.iter().all(|&(re, _)| re < 0.0))
}

/// All eigenvalues strictly inside the unit disc.
pub fn is_schur_stable(a: &DMatrix<f64>) -> bool {
    eigenvalues(a).is_some_and(|ev| ev.iter().all(|&(re, im)| re.hypot(im) < 1.0))
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<(), NumoptError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(NumoptError::DimensionMismatch(format!(
            "{name} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_riccati_dims(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(), NumoptError> {
    let n = a.nrows();
    check_square("A", a, n)?;
    if b.nrows() != n {
        return Err(NumoptError::DimensionMismatch(format!(
            "B has {} rows, expected {n}",
            b.nrows()
        )));
    }
    check_square("Q", q, n)?;
    check_square("R", r, b.ncols())
}

fn spd_inverse(name: &str, m: &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError> {
    let chol = Cholesky::new(symmetrize(m)).ok_or_else(|| {
        NumoptError::InvalidArgument(format!("{name} must be symmetric positive definite"))
    })?;
    Ok(chol.inverse())
}

/// Solves `Aᵀ X + X A + C = 0`.
pub fn solve_continuous_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError> {
    let n = a.nrows();
    check_square("A", a, n)?;
    check_square("C", c, n)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| NumoptError::Singular("Lyapunov operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Solves the Stein equation `X = Aᵀ X A + C`.
fn solve_stein(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError> {
    let n = a.nrows();
    let at = a.transpose();
    let op = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| NumoptError::Singular("Stein operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn care_residual_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    // Factored as (PB)R⁻¹(PB)ᵀ, which rounds less than P·BR⁻¹Bᵀ·P.
    let pb = p * b;
    symmetrize(&(a.transpose() * p + p * a - &pb * r_inv * pb.transpose() + q))
}

fn dare_residual_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, NumoptError> {
    let s = r + b.transpose() * p * b;
    let s_inv = spd_inverse("R + BᵀPB", &s)?;
    let bpa = b.transpose() * p * a;
    Ok(symmetrize(&(a.transpose() * p * a - p - bpa.transpose() * s_inv * &bpa + q)))
}

/// ‖AᵀP + PA − PBR⁻¹BᵀP + Q‖_F.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64, NumoptError> {
    check_riccati_dims(a, b, q, r)?;
    let r_inv = spd_inverse("R", r)?;
    Ok(care_residual_matrix(a, b, &r_inv, q, p).norm())
}

/// ‖AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q‖_F.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64, NumoptError> {
    check_riccati_dims(a, b, q, r)?;
    Ok(dare_residual_matrix(a, b, q, r, p)?.norm())
}

/// Newton steps in correction form: each step solves for `ΔP` with the
/// current residual as right-hand side, so rounding error scales with the
/// residual rather than with ‖P‖. Stops once the residual stops shrinking.
fn defect_correction(
    mut p: DMatrix<f64>,
    residual: impl Fn(&DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError>,
    correction: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError>,
) -> Result<(DMatrix<f64>, f64), NumoptError> {
    let mut res = residual(&p)?;
    let mut norm = res.norm();
    for _ in 0..MAX_CORRECTION_STEPS {
        if norm == 0.0 {
            break;
        }
        let candidate = symmetrize(&(&p + correction(&p, &res)?));
        let next = residual(&candidate)?;
        let next_norm = next.norm();
        if !(next_norm < norm) {
            break;
        }
        p = candidate;
        res = next;
        norm = next_norm;
    }
    Ok((p, norm))
}

fn check_accuracy(residual: f64, p: &DMatrix<f64>) -> Result<(), NumoptError> {
    if residual > RICCATI_TOL {
        return Err(NumoptError::Inaccurate {
            residual,
            tol: RICCATI_TOL,
            p_norm: p.norm(),
        });
    }
    Ok(())
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = (smax * 1e-12).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Stabilizing initial gain for the Newton iteration.
///
/// Zero when `A` is already Hurwitz; otherwise the Bass gain
/// `K = R⁻¹BᵀZ⁺` with `(A + βI)Z + Z(A + βI)ᵀ = 2BR⁻¹Bᵀ`, trying a ladder of
/// shifts β above the spectral radius bound ‖A‖_F until `A − BK` is Hurwitz.
fn initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> Result<DMatrix<f64>, NumoptError> {
    let n = a.nrows();
    let k = b.ncols();
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(k, n));
    }
    let s = b * r_inv * b.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut beta = a.norm() + 1.0;
    for _ in 0..6 {
        let shifted = (a + &eye * beta).transpose();
        let z = solve_continuous_lyapunov(&shifted, &(&s * -2.0))?;
        let gain = r_inv * b.transpose() * pseudo_inverse(&symmetrize(&z));
        if is_hurwitz(&(a - b * &gain)) {
            return Ok(gain);
        }
        beta *= 2.0;
    }
    Err(NumoptError::NonStabilizable(
        "no stabilizing initial gain found".into(),
    ))
}

/// Stabilizing solution of the continuous-time algebraic Riccati equation.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<RiccatiSolution, NumoptError> {
    check_riccati_dims(a, b, q, r)?;
    let r_inv = spd_inverse("R", r)?;
    let mut k = initial_gain(a, b, &r_inv)?;
    let mut p_prev: Option<DMatrix<f64>> = None;
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    for _ in 0..MAX_NEWTON_ITERS {
        let ac = a - b * &k;
        let c = q + k.transpose() * r * &k;
        p = symmetrize(&solve_continuous_lyapunov(&ac, &c)?);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NumoptError::NonStabilizable("Newton iteration diverged".into()));
        }
        k = &r_inv * b.transpose() * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).norm() <= 1e-14 * p.norm().max(1.0) {
                break;
            }
        }
        p_prev = Some(p.clone());
    }
    let (p, residual_norm) = defect_correction(
        p,
        |p| Ok(care_residual_matrix(a, b, &r_inv, q, p)),
        |p, res| solve_continuous_lyapunov(&(a - b * (&r_inv * b.transpose() * p)), res),
    )?;
    let k = &r_inv * b.transpose() * &p;
    if !is_hurwitz(&(a - b * &k)) {
        return Err(NumoptError::NonStabilizable("closed loop A − BK is not Hurwitz".into()));
    }
    check_accuracy(residual_norm, &p)?;
    Ok(RiccatiSolution { p, k, residual_norm })
}

/// Stabilizing solution of the discrete-time algebraic Riccati equation.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<RiccatiSolution, NumoptError> {
    check_riccati_dims(a, b, q, r)?;
    let n = a.nrows();
    let r_inv = spd_inverse("R", r)?;
    let eye = DMatrix::<f64>::identity(n, n);

    // Structure-preserving doubling: H_k → P quadratically.
    let mut ak = a.clone();
    let mut gk = b * &r_inv * b.transpose();
    let mut hk = symmetrize(q);
    let mut converged = false;
    for _ in 0..MAX_DOUBLING_ITERS {
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu
            .solve(&ak)
            .ok_or_else(|| NumoptError::NonStabilizable("singular doubling step".into()))?;
        let w_inv_g = lu
            .solve(&gk)
            .ok_or_else(|| NumoptError::NonStabilizable("singular doubling step".into()))?;
        let a_next = &ak * &w_inv_a;
        let g_next = symmetrize(&(&gk + &ak * w_inv_g * ak.transpose()));
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_inv_a));
        let delta = (&h_next - &hk).norm();
        let scale = h_next.norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !scale.is_finite() || scale > DIVERGENCE_NORM {
            return Err(NumoptError::NonStabilizable("doubling iteration diverged".into()));
        }
        if delta <= 1e-15 * scale.max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumoptError::NonStabilizable("doubling iteration did not converge".into()));
    }

    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, NumoptError> {
        let s = r + b.transpose() * p * b;
        Ok(spd_inverse("R + BᵀPB", &s)? * b.transpose() * p * a)
    };
    if !is_schur_stable(&(a - b * gain(&hk)?)) {
        return Err(NumoptError::NonStabilizable(
            "closed loop A − BK is not Schur stable".into(),
        ));
    }
    // Hewer steps in correction form: ΔP = AcᵀΔPAc + residual.
    let (p, residual_norm) = defect_correction(
        hk,
        |p| dare_residual_matrix(a, b, q, r, p),
        |p, res| solve_stein(&(a - b * gain(p)?), res),
    )?;
    let k = gain(&p)?;
    if !is_schur_stable(&(a - b * &k)) {
        return Err(NumoptError::NonStabilizable(
            "closed loop A − BK is not Schur stable".into(),
        ));
    }
    check_accuracy(residual_norm, &p)?;
    Ok(RiccatiSolution { p, k, residual_norm })
}
