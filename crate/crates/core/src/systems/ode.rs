use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// One classical fourth-order Runge-Kutta step with `u` held constant.
pub fn rk4_step<F>(f: &F, x: &[f64], u: &[f64], dt: f64) -> Vec<f64>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let offset = |k: &[f64], h: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = f(x, u);
    let k2 = f(&offset(&k1, dt / 2.0), u);
    let k3 = f(&offset(&k2, dt / 2.0), u);
    let k4 = f(&offset(&k3, dt), u);
    (0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Integrates `ẋ = f(x, u)` for `inputs.rows()` steps of size `dt`, holding
/// row `t` of `inputs` constant over step `t`. Returns the `(steps + 1) × n_x`
/// state series starting at `x0`.
pub fn rk4_integrate<F>(f: F, x0: &[f64], inputs: &Matrix, dt: f64) -> Result<Matrix>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    rk4_integrate_projected(f, |_| {}, x0, inputs, dt)
}

/// As [`rk4_integrate`], applying `project` to the state after every step.
pub fn rk4_integrate_projected<F, P>(f: F, project: P, x0: &[f64], inputs: &Matrix, dt: f64) -> Result<Matrix>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    P: Fn(&mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("integration step must be positive, got {dt}")));
    }
    let steps = inputs.rows();
    let n = x0.len();
    let mut out = Vec::with_capacity((steps + 1) * n);
    out.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for t in 0..steps {
        let mut next = rk4_step(&f, &x, inputs.row_slice(t), dt);
        project(&mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: t + 1 });
        }
        out.extend_from_slice(&next);
        x = next;
    }
    Matrix::from_vec(steps + 1, n, out)
}
