//! Exothermic continuous stirred tank reactor.
//!
//! States: product concentration `x1` and reactor temperature `x2`; input:
//! coolant jacket temperature `u`. Both states are measured.

use serde::{Deserialize, Serialize};

use super::ode::rk4_integrate;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CstrParams {
    /// Pre-exponential factor, 1/min.
    pub k0: f64,
    /// Activation energy, J/mol.
    pub e: f64,
    /// Gas constant, J/(mol·K).
    pub r: f64,
    /// Volumetric flow, L/min.
    pub q: f64,
    /// Reactor volume, L.
    pub v: f64,
    /// Heat of reaction (−ΔH), J/mol.
    pub h: f64,
    /// Density, g/L.
    pub rho: f64,
    /// Heat capacity, J/(g·K).
    pub cp: f64,
    /// Heat transfer coefficient times area, J/(min·K).
    pub ua: f64,
    /// Feed temperature, K.
    pub tf: f64,
    /// Feed concentration, mol/L.
    pub caf: f64,
}

impl Default for CstrParams {
    /// Standard exothermic CSTR benchmark values (E/R = 8750 K).
    fn default() -> Self {
        let r = 8.314;
        Self {
            k0: 7.2e10,
            e: 8750.0 * r,
            r,
            q: 100.0,
            v: 100.0,
            h: 5e4,
            rho: 1000.0,
            cp: 0.239,
            ua: 5e4,
            tf: 350.0,
            caf: 1.0,
        }
    }
}

impl CstrParams {
    pub fn validate(&self) -> Result<()> {
        let p = [self.k0, self.e, self.r, self.q, self.v, self.h, self.rho, self.cp, self.ua, self.tf, self.caf];
        // k0 = 0 is allowed: it switches the reaction off.
        if p.iter().any(|v| !v.is_finite() || *v < 0.0)
            || self.q == 0.0
            || self.v == 0.0
            || self.rho == 0.0
            || self.cp == 0.0
        {
            return Err(Error::Config("CSTR parameters must be positive".into()));
        }
        Ok(())
    }

    /// Right-hand side `ẋ = f(x, u)`.
    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (ca, temp, tc) = (x[0], x[1], u[0]);
        let rate = self.k0 * (-self.e / (self.r * temp)).exp() * ca;
        let flow = self.q / self.v;
        let dca = flow * (self.caf - ca) - rate;
        let dtemp = flow * (self.tf - temp)
            + self.h / (self.rho * self.cp) * rate
            + self.ua / (self.v * self.rho * self.cp) * (tc - temp);
        vec![dca, dtemp]
    }
}

/// Coolant temperature at which the benchmark's nominal steady state sits.
pub const CSTR_NOMINAL_COOLANT: f64 = 300.0;
/// Nominal steady state `(C_a, T)` for a 300 K coolant.
pub const CSTR_NOMINAL_STATE: [f64; 2] = [0.877_252_946, 324.475_443_43];

/// Simulates the reactor; row `t` of the result is the state at step `t`
/// (the state before `u_t` is applied), so outputs pair with inputs row by row.
pub fn simulate_cstr(params: &CstrParams, u: &Matrix, x0: [f64; 2], dt: f64) -> Result<Matrix> {
    params.validate()?;
    if u.rows() == 0 || u.cols() != 1 {
        return Err(Error::Config("CSTR input must be a non-empty T x 1 series".into()));
    }
    let xs = rk4_integrate(|x, u| params.derivative(x, u), &x0, u, dt)?;
    Matrix::from_vec(u.rows(), 2, xs.as_slice()[..u.rows() * 2].to_vec())
}
