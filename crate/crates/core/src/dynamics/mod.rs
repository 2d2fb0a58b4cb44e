//! Closed-form models of the cart-pole and the 1D/2D quadrotors.
//!
//! State and input orderings are fixed:
//!
//! | system       | state                    | input      |
//! |--------------|--------------------------|------------|
//! | cart-pole    | `[x, ẋ, θ, θ̇]`           | `[F]`      |
//! | quadrotor 1D | `[z, ż]`                 | `[T]`      |
//! | quadrotor 2D | `[x, ẋ, z, ż, θ, θ̇]`     | `[T₁, T₂]` |
//!
//! A [`DynamicsModel`] is both the simulated plant and the prior model handed
//! to controllers; the two differ only in their parameter records.

mod params;

pub use params::{CartPoleParams, Params, Quad1DParams, Quad2DParams};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numopt::{self, NumoptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemId {
    #[serde(rename = "cartpole")]
    CartPole,
    #[serde(rename = "quadrotor_1d")]
    Quad1D,
    #[serde(rename = "quadrotor_2d")]
    Quad2D,
}

impl SystemId {
    pub fn name(self) -> &'static str {
        match self {
            SystemId::CartPole => "cartpole",
            SystemId::Quad1D => "quadrotor_1d",
            SystemId::Quad2D => "quadrotor_2d",
        }
    }

    pub fn n_x(self) -> usize {
        match self {
            SystemId::CartPole => 4,
            SystemId::Quad1D => 2,
            SystemId::Quad2D => 6,
        }
    }

    pub fn n_u(self) -> usize {
        match self {
            SystemId::CartPole | SystemId::Quad1D => 1,
            SystemId::Quad2D => 2,
        }
    }

    /// State indices of the acceleration channels, in generalized-coordinate order.
    pub fn accel_indices(self) -> &'static [usize] {
        match self {
            SystemId::CartPole => &[1, 3],
            SystemId::Quad1D => &[1],
            SystemId::Quad2D => &[1, 3, 5],
        }
    }

    pub fn state_labels(self) -> &'static [&'static str] {
        match self {
            SystemId::CartPole => &["x", "x_dot", "theta", "theta_dot"],
            SystemId::Quad1D => &["z", "z_dot"],
            SystemId::Quad2D => &["x", "x_dot", "z", "z_dot", "theta", "theta_dot"],
        }
    }

    pub fn input_labels(self) -> &'static [&'static str] {
        match self {
            SystemId::CartPole => &["F"],
            SystemId::Quad1D => &["T"],
            SystemId::Quad2D => &["T1", "T2"],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("state became non-finite")]
    NonFiniteState,
    #[error("invalid parameter {name} = {value}: must be strictly positive")]
    InvalidParams { name: &'static str, value: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Numeric(#[from] NumoptError),
}

/// Discrete affine model `x⁺ ≈ x̄ + Ad (x − x̄) + Bd (u − ū) + offset`,
/// exact to first order about `(x̄, ū)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
}

impl LinearizedModel {
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.x_ref + &self.ad * (x - &self.x_ref) + &self.bd * (u - &self.u_ref) + &self.offset
    }
}

/// One RK4 step together with its exact Jacobians with respect to the
/// initial state and the held input.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSensitivity {
    pub x_next: DVector<f64>,
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    params: Params,
}

impl DynamicsModel {
    pub fn new(params: Params) -> Result<Self, DynamicsError> {
        params.validate()?;
        Ok(Self { params })
    }

    /// Model with the documented default parameters.
    pub fn default_for(system: SystemId) -> Self {
        Self {
            params: Params::default_for(system),
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn system_id(&self) -> SystemId {
        self.params.system_id()
    }

    pub fn n_x(&self) -> usize {
        self.system_id().n_x()
    }

    pub fn n_u(&self) -> usize {
        self.system_id().n_u()
    }

    /// Copy with the inertial parameters multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, DynamicsError> {
        Self::new(self.params.scaled_inertial(factor))
    }

    /// Input that balances gravity at rest: `F = 0`, `T = mg`, `T₁ = T₂ = mg/2`.
    pub fn equilibrium_input(&self) -> DVector<f64> {
        match &self.params {
            Params::CartPole(_) => DVector::zeros(1),
            Params::Quad1D(p) => DVector::from_element(1, p.m * p.g),
            Params::Quad2D(p) => DVector::from_element(2, p.m * p.g / 2.0),
        }
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(), DynamicsError> {
        if x.len() != self.n_x() {
            return Err(DynamicsError::DimensionMismatch {
                what: "state",
                got: x.len(),
                expected: self.n_x(),
            });
        }
        if u.len() != self.n_u() {
            return Err(DynamicsError::DimensionMismatch {
                what: "input",
                got: u.len(),
                expected: self.n_u(),
            });
        }
        Ok(())
    }

    /// Continuous-time right-hand side `ẋ = f(x, u)`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.check(x, u)?;
        Ok(self.rhs(x, u))
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.params {
            Params::CartPole(p) => {
                let (theta, omega, force) = (x[2], x[3], u[0]);
                let total = p.m_c + p.m_p;
                let (s, c) = theta.sin_cos();
                let temp = (force + p.m_p * p.l * omega * omega * s) / total;
                let den = p.l * (4.0 / 3.0 - p.m_p * c * c / total);
                let theta_dd = (p.g * s - c * temp) / den;
                let x_dd = temp - p.m_p * p.l * theta_dd * c / total;
                DVector::from_vec(vec![x[1], x_dd, omega, theta_dd])
            }
            Params::Quad1D(p) => DVector::from_vec(vec![x[1], u[0] / p.m - p.g]),
            Params::Quad2D(p) => {
                let thrust = u[0] + u[1];
                let (s, c) = x[4].sin_cos();
                DVector::from_vec(vec![
                    x[1],
                    s * thrust / p.m,
                    x[3],
                    c * thrust / p.m - p.g,
                    x[5],
                    (u[1] - u[0]) * p.moment_arm() / p.i_yy,
                ])
            }
        }
    }

    /// Analytic Jacobians `(∂f/∂x, ∂f/∂u)`.
    pub fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check(x, u)?;
        Ok(self.jac(x, u))
    }

    fn jac(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_x();
        let k = self.n_u();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, k);
        match &self.params {
            Params::CartPole(p) => {
                let (theta, omega, force) = (x[2], x[3], u[0]);
                let total = p.m_c + p.m_p;
                let ml = p.m_p * p.l;
                let (s, c) = theta.sin_cos();
                let temp = (force + ml * omega * omega * s) / total;
                let dtemp_dth = ml * omega * omega * c / total;
                let dtemp_dw = 2.0 * ml * omega * s / total;
                let dtemp_df = 1.0 / total;

                let num = p.g * s - c * temp;
                let den = p.l * (4.0 / 3.0 - p.m_p * c * c / total);
                let theta_dd = num / den;
                let dden_dth = p.l * 2.0 * p.m_p * c * s / total;
                let dnum_dth = p.g * c + s * temp - c * dtemp_dth;
                let dnum_dw = -c * dtemp_dw;
                let dnum_df = -c * dtemp_df;

                let dthdd_dth = (dnum_dth - theta_dd * dden_dth) / den;
                let dthdd_dw = dnum_dw / den;
                let dthdd_df = dnum_df / den;

                let k_ml = ml / total;
                let dxdd_dth = dtemp_dth - k_ml * (dthdd_dth * c - theta_dd * s);
                let dxdd_dw = dtemp_dw - k_ml * dthdd_dw * c;
                let dxdd_df = dtemp_df - k_ml * dthdd_df * c;

                a[(0, 1)] = 1.0;
                a[(1, 2)] = dxdd_dth;
                a[(1, 3)] = dxdd_dw;
                a[(2, 3)] = 1.0;
                a[(3, 2)] = dthdd_dth;
                a[(3, 3)] = dthdd_dw;
                b[(1, 0)] = dxdd_df;
                b[(3, 0)] = dthdd_df;
            }
            Params::Quad1D(p) => {
                a[(0, 1)] = 1.0;
                b[(1, 0)] = 1.0 / p.m;
            }
            Params::Quad2D(p) => {
                let thrust = u[0] + u[1];
                let (s, c) = x[4].sin_cos();
                let arm = p.moment_arm() / p.i_yy;
                a[(0, 1)] = 1.0;
                a[(1, 4)] = c * thrust / p.m;
                a[(2, 3)] = 1.0;
                a[(3, 4)] = -s * thrust / p.m;
                a[(4, 5)] = 1.0;
                b[(1, 0)] = s / p.m;
                b[(1, 1)] = s / p.m;
                b[(3, 0)] = c / p.m;
                b[(3, 1)] = c / p.m;
                b[(5, 0)] = -arm;
                b[(5, 1)] = arm;
            }
        }
        (a, b)
    }

    fn rhs_with_force(&self, x: &DVector<f64>, u: &DVector<f64>, extra: Option<&DVector<f64>>) -> DVector<f64> {
        let mut f = self.rhs(x, u);
        if let Some(extra) = extra {
            for (&idx, v) in self.system_id().accel_indices().iter().zip(extra.iter()) {
                f[idx] += v;
            }
        }
        f
    }

    /// Classical RK4 step with the input held over `dt`.
    ///
    /// `extra_accel`, when given, has one entry per generalized coordinate
    /// (`[x, θ]`, `[z]`, `[x, z, θ]`) and is added to the corresponding
    /// acceleration channels of the right-hand side.
    pub fn rk4_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
        extra_accel: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>, DynamicsError> {
        self.check(x, u)?;
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        if let Some(extra) = extra_accel {
            let dof = self.system_id().accel_indices().len();
            if extra.len() != dof {
                return Err(DynamicsError::DimensionMismatch {
                    what: "extra acceleration",
                    got: extra.len(),
                    expected: dof,
                });
            }
        }
        let k1 = self.rhs_with_force(x, u, extra_accel);
        let k2 = self.rhs_with_force(&(x + &k1 * (dt / 2.0)), u, extra_accel);
        let k3 = self.rhs_with_force(&(x + &k2 * (dt / 2.0)), u, extra_accel);
        let k4 = self.rhs_with_force(&(x + &k3 * dt), u, extra_accel);
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(DynamicsError::NonFiniteState)
        }
    }

    /// `substeps` RK4 steps of length `dt / substeps`, with the exact
    /// Jacobians of the composite map (chain rule through every stage).
    pub fn rk4_sensitivity(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
        substeps: usize,
    ) -> Result<StepSensitivity, DynamicsError> {
        self.check(x, u)?;
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        let n = self.n_x();
        let k = self.n_u();
        let h = dt / substeps.max(1) as f64;
        let eye = DMatrix::<f64>::identity(n, n);
        let mut xs = x.clone();
        let mut fx = eye.clone();
        let mut fu = DMatrix::zeros(n, k);
        for _ in 0..substeps.max(1) {
            let (a1, b1) = self.jac(&xs, u);
            let k1 = self.rhs(&xs, u);
            let x2 = &xs + &k1 * (h / 2.0);
            let (a2, b2) = self.jac(&x2, u);
            let k2 = self.rhs(&x2, u);
            let d2x = &eye + &a1 * (h / 2.0);
            let d2u = &b1 * (h / 2.0);
            let k2x = &a2 * &d2x;
            let k2u = &a2 * &d2u + &b2;
            let x3 = &xs + &k2 * (h / 2.0);
            let (a3, b3) = self.jac(&x3, u);
            let k3 = self.rhs(&x3, u);
            let k3x = &a3 * (&eye + &k2x * (h / 2.0));
            let k3u = &a3 * (&k2u * (h / 2.0)) + &b3;
            let x4 = &xs + &k3 * h;
            let (a4, b4) = self.jac(&x4, u);
            let k4 = self.rhs(&x4, u);
            let k4x = &a4 * (&eye + &k3x * h);
            let k4u = &a4 * (&k3u * h) + &b4;

            let step_x = &eye + (&a1 + &k2x * 2.0 + &k3x * 2.0 + &k4x) * (h / 6.0);
            let step_u = (&b1 + &k2u * 2.0 + &k3u * 2.0 + &k4u) * (h / 6.0);
            xs = &xs + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            fu = &step_x * &fu + step_u;
            fx = &step_x * &fx;
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState);
        }
        Ok(StepSensitivity { x_next: xs, fx, fu })
    }

    /// Zero-order-hold linearization about `(x_ref, u_ref)`.
    pub fn linearize_discrete(
        &self,
        x_ref: &DVector<f64>,
        u_ref: &DVector<f64>,
        dt: f64,
    ) -> Result<LinearizedModel, DynamicsError> {
        self.check(x_ref, u_ref)?;
        if !(dt > 0.0) {
            return Err(DynamicsError::InvalidStep(dt));
        }
        let (a, b) = self.jac(x_ref, u_ref);
        let f = self.rhs(x_ref, u_ref);
        let (ad, bd, offset) = numopt::zoh_affine(&a, &b, &f, dt)?;
        Ok(LinearizedModel {
            ad,
            bd,
            offset,
            x_ref: x_ref.clone(),
            u_ref: u_ref.clone(),
        })
    }
}
