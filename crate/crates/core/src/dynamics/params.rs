use serde::{Deserialize, Serialize};

use super::{DynamicsError, SystemId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    /// Cart mass (kg).
    pub m_c: f64,
    /// Pole mass (kg).
    pub m_p: f64,
    /// Pole half-length (m).
    pub l: f64,
    pub g: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            m_c: 1.0,
            m_p: 0.1,
            l: 0.5,
            g: 9.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad1DParams {
    pub m: f64,
    pub g: f64,
}

impl Default for Quad1DParams {
    fn default() -> Self {
        Self { m: 0.027, g: 9.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad2DParams {
    pub m: f64,
    /// Pitch moment of inertia (kg·m²).
    pub i_yy: f64,
    /// Distance from each motor pair to the center of mass (m).
    pub l_arm: f64,
    pub g: f64,
}

impl Quad2DParams {
    /// Effective moment arm `l_arm / √2`; always derived, never stored.
    pub fn moment_arm(&self) -> f64 {
        self.l_arm / std::f64::consts::SQRT_2
    }
}

impl Default for Quad2DParams {
    fn default() -> Self {
        Self {
            m: 0.027,
            i_yy: 1.4e-5,
            l_arm: 0.0397,
            g: 9.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Params {
    CartPole(CartPoleParams),
    Quad1D(Quad1DParams),
    Quad2D(Quad2DParams),
}

impl Params {
    pub fn default_for(system: SystemId) -> Self {
        match system {
            SystemId::CartPole => Params::CartPole(CartPoleParams::default()),
            SystemId::Quad1D => Params::Quad1D(Quad1DParams::default()),
            SystemId::Quad2D => Params::Quad2D(Quad2DParams::default()),
        }
    }

    pub fn system_id(&self) -> SystemId {
        match self {
            Params::CartPole(_) => SystemId::CartPole,
            Params::Quad1D(_) => SystemId::Quad1D,
            Params::Quad2D(_) => SystemId::Quad2D,
        }
    }

    /// `(name, value)` for every parameter, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match self {
            Params::CartPole(p) => vec![("m_c", p.m_c), ("m_p", p.m_p), ("l", p.l), ("g", p.g)],
            Params::Quad1D(p) => vec![("m", p.m), ("g", p.g)],
            Params::Quad2D(p) => vec![("m", p.m), ("i_yy", p.i_yy), ("l_arm", p.l_arm), ("g", p.g)],
        }
    }

    /// Names of the parameters subject to inertial randomization and prior scaling.
    pub fn inertial_names(&self) -> &'static [&'static str] {
        match self {
            Params::CartPole(_) => &["m_c", "m_p", "l"],
            Params::Quad1D(_) => &["m"],
            Params::Quad2D(_) => &["m", "i_yy"],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    /// Returns a copy with `name` set to `value`; `None` for unknown names.
    pub fn with(&self, name: &str, value: f64) -> Option<Self> {
        let mut out = *self;
        let slot = match &mut out {
            Params::CartPole(p) => match name {
                "m_c" => &mut p.m_c,
                "m_p" => &mut p.m_p,
                "l" => &mut p.l,
                "g" => &mut p.g,
                _ => return None,
            },
            Params::Quad1D(p) => match name {
                "m" => &mut p.m,
                "g" => &mut p.g,
                _ => return None,
            },
            Params::Quad2D(p) => match name {
                "m" => &mut p.m,
                "i_yy" => &mut p.i_yy,
                "l_arm" => &mut p.l_arm,
                "g" => &mut p.g,
                _ => return None,
            },
        };
        *slot = value;
        Some(out)
    }

    pub fn scaled_inertial(&self, factor: f64) -> Self {
        let mut out = *self;
        for name in self.inertial_names() {
            let v = self.get(name).unwrap_or_default();
            out = out.with(name, v * factor).unwrap_or(out);
        }
        out
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, value) in self.entries() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(DynamicsError::InvalidParams { name, value });
            }
        }
        Ok(())
    }
}
