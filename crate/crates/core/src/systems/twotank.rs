//! Two tanks connected by a valve, the first one fed by a pump.
//!
//! States are the liquid levels `x1`, `x2` in `[0, 1]`. Inputs follow the
//! equations' roles: `u1` splits the pump flow between the tanks (valve) and
//! `u2` scales the pump inflow.

use serde::{Deserialize, Serialize};

use super::ode::rk4_integrate_projected;
use crate::diffcore::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTankParams {
    /// Inflow coefficient.
    pub c1: f64,
    /// Outflow coefficient.
    pub c2: f64,
}

impl Default for TwoTankParams {
    fn default() -> Self {
        Self { c1: 0.08, c2: 0.04 }
    }
}

impl TwoTankParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.c1.is_finite() && self.c2.is_finite()) {
            return Err(Error::Config("two-tank coefficients must be positive".into()));
        }
        Ok(())
    }

    /// Right-hand side; a tank above full level stops changing.
    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (valve, pump) = (u[0], u[1]);
        let s1 = x[0].max(0.0).sqrt();
        let s2 = x[1].max(0.0).sqrt();
        let d1 = if x[0] <= 1.0 { (1.0 - valve) * self.c1 * pump - self.c2 * s1 } else { 0.0 };
        let d2 = if x[1] <= 1.0 { self.c1 * valve * pump + self.c2 * s1 - self.c2 * s2 } else { 0.0 };
        vec![d1, d2]
    }
}

fn clip_levels(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Simulates the tanks; row `t` of the result is the level pair at step `t`.
pub fn simulate_twotank(params: &TwoTankParams, u: &Matrix, x0: [f64; 2], dt: f64) -> Result<Matrix> {
    params.validate()?;
    if u.rows() == 0 || u.cols() != 2 {
        return Err(Error::Config("two-tank input must be a non-empty T x 2 series".into()));
    }
    if u.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("two-tank inputs must lie in [0, 1]".into()));
    }
    if x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(format!("initial levels must lie in [0, 1], got {x0:?}")));
    }
    let xs = rk4_integrate_projected(|x, u| params.derivative(x, u), clip_levels, &x0, u, dt)?;
    Matrix::from_vec(u.rows(), 2, xs.as_slice()[..u.rows() * 2].to_vec())
}
