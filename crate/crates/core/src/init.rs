//! Seeded parameter initialization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Matrix;

/// Deterministic source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on `±sqrt(1 / fan_in)`.
    pub fn scaled_uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(rows, cols, -bound, bound)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.rng.random_range(lo..hi)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized buffer")
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized buffer")
    }

    /// Orthogonal `n × n` matrix from the QR factorization of a standard
    /// normal matrix, with columns sign-corrected so that `diag(R) > 0`.
    pub fn orthogonal(&mut self, n: usize) -> Matrix {
        let g = self.normal(n, n);
        orthogonal_from(&g)
    }
}

pub(crate) fn orthogonal_from(g: &Matrix) -> Matrix {
    let n = g.rows();
    let dm = DMatrix::from_row_slice(n, n, g.as_slice());
    let qr = dm.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, q[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_init_is_orthogonal_and_deterministic() {
        let q = Initializer::new(7).orthogonal(5);
        let qtq = q.transpose().matmul(&q).unwrap();
        assert!(qtq.sub(&Matrix::identity(5)).unwrap().max_abs() < 1e-12);
        assert_eq!(q, Initializer::new(7).orthogonal(5));
    }

    #[test]
    fn scaled_uniform_respects_bound() {
        let m = Initializer::new(1).scaled_uniform(10, 16, 16);
        assert!(m.max_abs() <= 0.25);
    }
}
