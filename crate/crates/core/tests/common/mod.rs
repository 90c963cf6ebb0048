#![allow(dead_code)]

use blockssm::diffcore::{Matrix, ParamStore, Tape, Var};
use blockssm::systems::{random_step_input, TrajectoryDataset};
use blockssm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

/// Largest relative difference between analytic gradients and central
/// differences over every scalar in `store`.
pub fn max_fd_error<F>(store: &mut ParamStore, f: F) -> f64
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    store.zero_grad();
    let (mut tape, root) = f(store).unwrap();
    tape.backward(root, store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store.grad(id).clone()).collect();

    let eval = |s: &ParamStore| {
        let (tape, root) = f(s).unwrap();
        tape.value(root).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (id, grad) in ids.iter().zip(&analytic) {
        for k in 0..grad.len() {
            let orig = store.value(*id).as_slice()[k];
            store.value_mut(*id).as_mut_slice()[k] = orig + FD_STEP;
            let up = eval(store);
            store.value_mut(*id).as_mut_slice()[k] = orig - FD_STEP;
            let down = eval(store);
            store.value_mut(*id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = grad.as_slice()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces a tape output to a scalar through fixed random weights so that
/// every output entry gets a distinct adjoint.
pub fn weighted_sum(tape: &mut Tape, v: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let w = tape.constant(random_matrix(rng, r, c))?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Dominant eigenvalue modulus by power iteration, for matrices whose
/// dominant eigenvalue is real and simple (e.g. positive matrices).
pub fn power_iteration(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut v = Matrix::filled(n, 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = m.matmul(&v).unwrap();
        let norm = w.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w.scale(1.0 / norm);
        let converged = (norm - lambda).abs() < 1e-15 * norm.max(1.0);
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    lambda
}

/// Singular values by one-sided Jacobi rotations.
pub fn jacobi_singular_values(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| m.get(r, c)).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (a[p][r], a[q][r]);
                    a[p][r] = c * x - s * y;
                    a[q][r] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = a.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Data from a random linear system `x⁺ = A x + B u`, `y = C x` whose
/// state matrix is rescaled to the given spectral radius.
pub fn linear_system_data(seed: u64, t: usize, n_x: usize, n_u: usize, n_y: usize, radius: f64) -> TrajectoryDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_matrix(&mut rng, n_x, n_x);
    let b = random_matrix(&mut rng, n_x, n_u);
    let c = random_matrix(&mut rng, n_y, n_x);
    let rho = blockssm::linmaps::eigenvalues(&a).unwrap().iter().map(|e| e.norm()).fold(0.0, f64::max);
    let a = a.scale(radius / rho);
    let u = random_step_input(seed.wrapping_add(1), t, (5, 30), &vec![(-1.0, 1.0); n_u]).unwrap();
    let mut x = Matrix::zeros(n_x, 1);
    let mut y = Matrix::zeros(t, n_y);
    for k in 0..t {
        let yk = c.matmul(&x).unwrap();
        for j in 0..n_y {
            y.set(k, j, yk.get(j, 0));
        }
        let uk = Matrix::column(u.row_slice(k));
        x = a.matmul(&x).unwrap().add(&b.matmul(&uk).unwrap()).unwrap();
    }
    TrajectoryDataset::new(u, y, 1.0).unwrap()
}
