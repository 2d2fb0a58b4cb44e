use nalgebra::{DMatrix, DVector};

use super::NumoptError;

/// Scaling target: the scaled argument satisfies ‖M‖₁ / 2^s ≤ SCALE_TARGET.
const SCALE_TARGET: f64 = 0.5;
/// Taylor degree. At ‖X‖₁ ≤ 0.5 the truncation term 0.5¹⁹/19! is ~1e-23.
const TAYLOR_DEGREE: usize = 18;

fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = norm1(m);
    let s = if norm > SCALE_TARGET {
        (norm / SCALE_TARGET).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let x = m / 2f64.powi(s);
    // Horner evaluation of Σ Xᵏ/k!.
    let eye = DMatrix::<f64>::identity(n, n);
    let mut t = eye.clone();
    for k in (1..=TAYLOR_DEGREE).rev() {
        t = &eye + (&x * &t) / k as f64;
    }
    for _ in 0..s {
        t = &t * &t;
    }
    t
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), NumoptError> {
    if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
        return Err(NumoptError::DimensionMismatch(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Exact zero-order-hold discretization of `ẋ = A x + B u` over `dt`:
/// `Ad = exp(A dt)`, `Bd = ∫₀^dt exp(Aτ) dτ · B`, read off the exponential of
/// the augmented matrix `[[A, B], [0, 0]]·dt`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), NumoptError> {
    check_dims(a, b)?;
    if !(dt > 0.0) {
        return Err(NumoptError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = a.nrows();
    let k = b.ncols();
    let mut aug = DMatrix::zeros(n + k, n + k);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, k)).copy_from(&(b * dt));
    let e = expm(&aug);
    Ok((e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, k)).into_owned()))
}

/// ZOH discretization of the affine system `ẋ = A x + B u + c`; returns
/// `(Ad, Bd, cd)` with `cd = ∫₀^dt exp(Aτ) dτ · c`.
pub fn zoh_affine(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>), NumoptError> {
    check_dims(a, b)?;
    if c.len() != a.nrows() {
        return Err(NumoptError::DimensionMismatch(format!(
            "affine term has length {}, expected {}",
            c.len(),
            a.nrows()
        )));
    }
    let n = a.nrows();
    let k = b.ncols();
    let mut bc = DMatrix::zeros(n, k + 1);
    bc.view_mut((0, 0), (n, k)).copy_from(b);
    bc.set_column(k, c);
    let (ad, bcd) = zoh_discretize(a, &bc, dt)?;
    Ok((
        ad,
        bcd.view((0, 0), (n, k)).into_owned(),
        bcd.column(k).into_owned(),
    ))
}
