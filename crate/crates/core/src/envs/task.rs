use nalgebra::{DMatrix, DVector};

use super::EnvError;
use crate::dynamics::SystemId;

/// Classic cart-pole termination angle (12°).
pub const DEFAULT_THETA_MAX: f64 = 0.2094;
/// Fraction of an edge's duration over which square-trajectory corners are rounded.
pub const SQUARE_CORNER_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Stabilization,
    Tracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// Negated quadratic stage cost.
    Quadratic,
    /// 1 per step while the pole stays within the termination angle.
    Sparse,
}

/// Objective of an episode: references, weights and length.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub reward: RewardKind,
    /// `steps + 1` reference states.
    pub x_ref: Vec<DVector<f64>>,
    /// `steps` reference inputs.
    pub u_ref: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub steps: usize,
    pub theta_max: f64,
}

impl TaskSpec {
    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<(), EnvError> {
        if self.x_ref.len() != self.steps + 1 || self.u_ref.len() != self.steps {
            return Err(EnvError::InvalidConfig(format!(
                "{} reference states and {} reference inputs for {} steps",
                self.x_ref.len(),
                self.u_ref.len(),
                self.steps
            )));
        }
        if self.x_ref.iter().any(|x| x.len() != n_x) || self.u_ref.iter().any(|u| u.len() != n_u) {
            return Err(EnvError::InvalidConfig("reference dimension mismatch".into()));
        }
        if self.q.shape() != (n_x, n_x) || self.r.shape() != (n_u, n_u) {
            return Err(EnvError::InvalidConfig("cost weight dimension mismatch".into()));
        }
        if self.q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(EnvError::InvalidConfig("Q must be positive semidefinite".into()));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(EnvError::InvalidConfig("R must be positive definite".into()));
        }
        Ok(())
    }

    /// Reference state at step `i`, clamped to the last one.
    pub fn x_ref_at(&self, i: usize) -> &DVector<f64> {
        &self.x_ref[i.min(self.steps)]
    }

    pub fn u_ref_at(&self, i: usize) -> &DVector<f64> {
        &self.u_ref[i.min(self.steps.saturating_sub(1))]
    }

    pub fn state_cost(&self, i: usize, x: &DVector<f64>) -> f64 {
        let e = x - self.x_ref_at(i);
        0.5 * e.dot(&(&self.q * &e))
    }

    pub fn input_cost(&self, i: usize, u: &DVector<f64>) -> f64 {
        let e = u - self.u_ref_at(i);
        0.5 * e.dot(&(&self.r * &e))
    }
}

/// `½ Σ (xᵢ − xᵢʳᵉᶠ)ᵀQ(xᵢ − xᵢʳᵉᶠ) + ½ Σ (uᵢ − uᵢʳᵉᶠ)ᵀR(uᵢ − uᵢʳᵉᶠ)` over a
/// trace of `k + 1` states and `k ≤ steps` inputs.
pub fn quadratic_cost(task: &TaskSpec, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> Result<f64, EnvError> {
    if states.len() != inputs.len() + 1 || inputs.len() > task.steps {
        return Err(EnvError::DimensionMismatch(format!(
            "{} states and {} inputs for a task of {} steps",
            states.len(),
            inputs.len(),
            task.steps
        )));
    }
    let n_x = task.q.nrows();
    let n_u = task.r.nrows();
    if states.iter().any(|x| x.len() != n_x) || inputs.iter().any(|u| u.len() != n_u) {
        return Err(EnvError::DimensionMismatch("trace vector length".into()));
    }
    let state: f64 = states.iter().enumerate().map(|(i, x)| task.state_cost(i, x)).sum();
    let input: f64 = inputs.iter().enumerate().map(|(i, u)| task.input_cost(i, u)).sum();
    Ok(state + input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryShape {
    Circle,
    Sine,
    Lemniscate,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub shape: TrajectoryShape,
    /// Radius, amplitude or half side length (m).
    pub scale: f64,
    /// Time for one full traversal (s).
    pub period: f64,
    /// Horizontal and vertical position of the trajectory's center.
    pub center: (f64, f64),
}

/// Planar position and velocity `(a, b, ȧ, ḃ)` relative to the center.
fn planar(spec: &TrajectorySpec, t: f64) -> (f64, f64, f64, f64) {
    let s = spec.scale;
    let w = 2.0 * std::f64::consts::PI / spec.period;
    let (sn, cs) = (w * t).sin_cos();
    match spec.shape {
        TrajectoryShape::Circle => (s * cs, s * sn, -s * w * sn, s * w * cs),
        TrajectoryShape::Sine => (s * t / spec.period, s * sn, s / spec.period, s * w * cs),
        TrajectoryShape::Lemniscate => (
            s * sn,
            s * sn * cs,
            s * w * cs,
            s * w * (cs * cs - sn * sn),
        ),
        TrajectoryShape::Square => square(s, spec.period, t),
    }
}

/// Square of half side `s`, counterclockwise from `(s, 0)`, corners rounded
/// by ramping the velocity linearly over a window centered on each corner.
fn square(s: f64, period: f64, t: f64) -> (f64, f64, f64, f64) {
    let speed = 8.0 * s / period;
    let window = SQUARE_CORNER_FRACTION * period / 4.0;
    let corners = [(s, s), (-s, s), (-s, -s), (s, -s)];
    let dirs = [(0.0, 1.0), (-1.0, 0.0), (0.0, -1.0), (1.0, 0.0), (0.0, 1.0)];
    let tau = t.rem_euclid(period);
    // Corner k sits at (2k + 1)·period/8 between direction k and k + 1.
    for k in 0..4 {
        let tc = (2 * k + 1) as f64 * period / 8.0;
        if (tau - tc).abs() < window / 2.0 {
            let (v1, v2) = (dirs[k], dirs[k + 1]);
            let t0 = tc - window / 2.0;
            let dt = tau - t0;
            let (cx, cy) = corners[k];
            let (px, py) = (cx - v1.0 * speed * window / 2.0, cy - v1.1 * speed * window / 2.0);
            let frac = dt / window;
            let vx = speed * (v1.0 + (v2.0 - v1.0) * frac);
            let vy = speed * (v1.1 + (v2.1 - v1.1) * frac);
            let x = px + speed * (v1.0 * dt + (v2.0 - v1.0) * dt * dt / (2.0 * window));
            let y = py + speed * (v1.1 * dt + (v2.1 - v1.1) * dt * dt / (2.0 * window));
            return (x, y, vx, vy);
        }
    }
    // Straight segment: find the last corner passed.
    let seg = ((tau - period / 8.0) / (period / 4.0)).floor() as i64;
    let (start, dir, t_start) = if seg < 0 {
        ((s, 0.0), dirs[0], 0.0)
    } else {
        let k = seg as usize;
        (corners[k], dirs[k + 1], (2 * k + 1) as f64 * period / 8.0)
    };
    let dt = tau - t_start;
    (
        start.0 + dir.0 * speed * dt,
        start.1 + dir.1 * speed * dt,
        dir.0 * speed,
        dir.1 * speed,
    )
}

/// Reference states and inputs sampled at control steps `0..=steps`.
///
/// Planar shapes drive `(x, z)` of the 2D quadrotor. Single-axis systems
/// follow one coordinate: the cart the horizontal projection of a circle or
/// a sinusoid, the 1D quadrotor the vertical one. Every reference input is
/// `u_eq`.
pub fn generate_trajectory(
    spec: &TrajectorySpec,
    system: SystemId,
    steps: usize,
    dt: f64,
    u_eq: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), EnvError> {
    if !(spec.scale > 0.0) || !(spec.period > 0.0) || !(dt > 0.0) {
        return Err(EnvError::InvalidConfig(format!(
            "trajectory needs positive scale, period and step, got {}, {}, {dt}",
            spec.scale, spec.period
        )));
    }
    let planar_only = matches!(spec.shape, TrajectoryShape::Lemniscate | TrajectoryShape::Square);
    if planar_only && system != SystemId::Quad2D {
        return Err(EnvError::UnsupportedShape {
            shape: spec.shape,
            system,
        });
    }
    let w = 2.0 * std::f64::consts::PI / spec.period;
    let x_ref = (0..=steps)
        .map(|i| {
            let t = i as f64 * dt;
            match system {
                SystemId::Quad2D => {
                    let (a, b, da, db) = planar(spec, t);
                    DVector::from_vec(vec![spec.center.0 + a, da, spec.center.1 + b, db, 0.0, 0.0])
                }
                SystemId::CartPole => {
                    let (a, da) = match spec.shape {
                        TrajectoryShape::Circle => {
                            let (a, _, da, _) = planar(spec, t);
                            (a, da)
                        }
                        _ => (spec.scale * (w * t).sin(), spec.scale * w * (w * t).cos()),
                    };
                    DVector::from_vec(vec![spec.center.0 + a, da, 0.0, 0.0])
                }
                SystemId::Quad1D => {
                    let (_, b, _, db) = planar(spec, t);
                    DVector::from_vec(vec![spec.center.1 + b, db])
                }
            }
        })
        .collect();
    Ok((x_ref, vec![u_eq.clone(); steps]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec(shape: TrajectoryShape) -> TrajectorySpec {
        TrajectorySpec {
            shape,
            scale: 1.0,
            period: 4.0,
            center: (0.0, 1.0),
        }
    }

    #[test]
    fn circle_quarter_period() {
        let (x, _) = generate_trajectory(&spec(TrajectoryShape::Circle), SystemId::Quad2D, 100, 0.01, &DVector::zeros(2))
            .unwrap();
        assert!((x[0][0] - 1.0).abs() < 1e-15 && (x[0][2] - 1.0).abs() < 1e-15);
        assert!(x[100][0].abs() < 1e-12 && (x[100][2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sine_starts_at_mean_with_peak_velocity() {
        let (x, _) = generate_trajectory(&spec(TrajectoryShape::Sine), SystemId::Quad1D, 10, 0.02, &DVector::zeros(1))
            .unwrap();
        assert_eq!(x[0][0], 1.0);
        assert!((x[0][1] - 2.0 * PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn lemniscate_self_intersection() {
        let s = spec(TrajectoryShape::Lemniscate);
        let (a0, b0, _, _) = planar(&s, 0.0);
        let (a1, b1, _, _) = planar(&s, 2.0);
        assert!((a0 - a1).abs() < 1e-15 && (b0 - b1).abs() < 1e-15);
    }

    #[test]
    fn square_visits_corners_and_closes() {
        let s = spec(TrajectoryShape::Square);
        let (a, b, _, _) = planar(&s, 0.0);
        assert_eq!((a, b), (1.0, 0.0));
        // Midpoint of the top edge.
        let (a, b, va, vb) = planar(&s, 1.0);
        assert!(a.abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        assert!((va + 2.0).abs() < 1e-12 && vb == 0.0);
        let (a, b, _, _) = planar(&s, 4.0 - 1e-12);
        assert!((a - 1.0).abs() < 1e-9 && b.abs() < 1e-9);
    }

    #[test]
    fn single_axis_systems_reject_planar_shapes() {
        for shape in [TrajectoryShape::Lemniscate, TrajectoryShape::Square] {
            for system in [SystemId::CartPole, SystemId::Quad1D] {
                assert!(matches!(
                    generate_trajectory(&spec(shape), system, 5, 0.02, &DVector::zeros(1)),
                    Err(EnvError::UnsupportedShape { .. })
                ));
            }
        }
    }

    #[test]
    fn reference_inputs_are_equilibrium() {
        let u = DVector::from_vec(vec![0.13, 0.13]);
        let (_, ur) = generate_trajectory(&spec(TrajectoryShape::Circle), SystemId::Quad2D, 7, 0.02, &u).unwrap();
        assert_eq!(ur.len(), 7);
        assert!(ur.iter().all(|v| *v == u));
    }

    #[test]
    fn quadratic_cost_single_deviation() {
        let task = TaskSpec {
            kind: TaskKind::Stabilization,
            reward: RewardKind::Quadratic,
            x_ref: vec![DVector::zeros(2); 3],
            u_ref: vec![DVector::zeros(1); 2],
            q: DMatrix::identity(2, 2),
            r: DMatrix::zeros(1, 1),
            steps: 2,
            theta_max: DEFAULT_THETA_MAX,
        };
        let mut states = vec![DVector::zeros(2); 3];
        states[1] = DVector::from_vec(vec![0.3, -0.4]);
        let inputs = vec![DVector::from_element(1, 5.0); 2];
        assert!((quadratic_cost(&task, &states, &inputs).unwrap() - 0.125).abs() < 1e-15);
        assert!(quadratic_cost(&task, &states[..2], &inputs).is_err());
    }
}
