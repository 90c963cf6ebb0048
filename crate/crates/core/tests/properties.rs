mod common;

use blockssm::blocks::{blu, ActivationKind, BlockConfig, BlockKind};
use blockssm::diffcore::{Matrix, ParamStore, Tape};
use blockssm::init::Initializer;
use blockssm::linmaps::{LinMapKind, LinearMap, SpectralBounds};
use blockssm::objective::{total_loss, AdamW, AdamWConfig, LossTerms, LossWeights};
use blockssm::ssm::{BlockSsm, ModelClass, ModelConfig};
use blockssm::systems::{windows, TrajectoryDataset};
use common::random_matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_config(class: ModelClass) -> ModelConfig {
    ModelConfig {
        class,
        n_u: 2,
        n_y: 3,
        n_x: Some(4),
        n_p: 2,
        block: BlockConfig::new(BlockKind::ResMlp, 2, 6, ActivationKind::Gelu),
        observer: BlockConfig::new(BlockKind::Mlp, 1, 6, ActivationKind::Relu),
    }
}

fn class_strategy() -> impl Strategy<Value = ModelClass> {
    prop::sample::select(ModelClass::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pf_row_sums_stay_in_bounds(seed in 0u64..10_000, n in 1usize..9, lo in 0.0f64..0.9, width in 0.01f64..1.0) {
        let b = SpectralBounds::new(lo, lo + width).unwrap();
        let mut store = ParamStore::new();
        let map = LinearMap::new("pf", LinMapKind::PerronFrobenius, n, n, Some(b), &mut store, &mut Initializer::new(seed)).unwrap();
        let w = map.effective_matrix(&store).unwrap();
        for r in 0..n {
            let s: f64 = w.row_slice(r).iter().sum();
            prop_assert!(s >= b.lambda_min - 1e-12 && s <= b.lambda_max + 1e-12, "row {r} sums to {s}");
            prop_assert!(w.row_slice(r).iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn householder_factors_are_orthogonal(seed in 0u64..10_000, n_in in 1usize..8, n_out in 1usize..8) {
        let b = SpectralBounds::new(0.4, 0.7).unwrap();
        let mut store = ParamStore::new();
        let map = LinearMap::new("sp", LinMapKind::Spectral, n_in, n_out, Some(b), &mut store, &mut Initializer::new(seed)).unwrap();
        let (u, v) = map.householder_factors(&store).unwrap().unwrap();
        for q in [u, v] {
            let g = q.transpose().matmul(&q).unwrap();
            let err = g.sub(&Matrix::identity(q.cols())).unwrap().max_abs();
            prop_assert!(err < 1e-12, "gram error {err}");
        }
    }

    #[test]
    fn blu_stays_near_identity_and_monotone(x in -1e3f64..1e3, beta in -1.0f64..=1.0) {
        let y = blu(x, beta);
        prop_assert!((y - x).abs() <= beta.abs() * x.abs() + 1e-9);
        let h = 1e-3;
        prop_assert!(blu(x + h, beta) >= blu(x, beta) - 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_weights(
        vals in prop::collection::vec(0.0f64..5.0, 5),
        q1 in prop::collection::vec(0.0f64..2.0, 5),
        q2 in prop::collection::vec(0.0f64..2.0, 5),
    ) {
        let total = |q: &[f64]| {
            let mut tape = Tape::new();
            let v: Vec<_> = vals.iter().map(|x| tape.constant(Matrix::scalar(*x)).unwrap()).collect();
            let terms = LossTerms { l_y: v[0], l_reg: Some(v[1]), l_dx: Some(v[2]), l_con_y: Some(v[3]), l_con_fu: Some(v[4]) };
            let w = LossWeights { q_y: q[0], q_reg: q[1], q_dx: q[2], q_con_y: q[3], q_con_fu: q[4] };
            total_loss(&mut tape, &terms, &w).unwrap().1.total
        };
        let sum: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a + b).collect();
        let (a, b, c) = (total(&q1), total(&q2), total(&sum));
        prop_assert!((c - (a + b)).abs() <= 1e-12 * c.abs().max(1.0));
        let scaled: Vec<f64> = q1.iter().map(|q| 3.0 * q).collect();
        prop_assert!((total(&scaled) - 3.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn adamw_without_decay_is_adam(seed in 0u64..10_000, lr in 1e-4f64..1e-1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let id = store.add("w", random_matrix(&mut rng, 3, 2));
        let mut opt = AdamW::new(AdamWConfig::new(lr).with_weight_decay(0.0), &store);
        let cfg = *opt.config();
        let mut theta = store.value(id).as_slice().to_vec();
        let (mut m, mut v) = (vec![0.0; 6], vec![0.0; 6]);
        for t in 1..=20 {
            let g = random_matrix(&mut rng, 3, 2);
            store.zero_grad();
            store.get_mut(id).grad = g.clone();
            opt.step(&mut store).unwrap();
            for k in 0..6 {
                let gk = g.as_slice()[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                let m_hat = m[k] / (1.0 - cfg.beta1.powi(t));
                let v_hat = v[k] / (1.0 - cfg.beta2.powi(t));
                theta[k] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps));
            }
            prop_assert_eq!(store.value(id).as_slice(), &theta[..]);
        }
    }

    #[test]
    fn window_shapes_follow_horizon_and_lookback(t in 10usize..80, n in 1usize..6, n_p in 1usize..5, stride in 1usize..4) {
        prop_assume!(n + n_p <= t);
        let u = Matrix::from_vec(t, 2, (0..2 * t).map(|i| i as f64).collect()).unwrap();
        let y = Matrix::from_vec(t, 3, (0..3 * t).map(|i| -(i as f64)).collect()).unwrap();
        let w = windows(&TrajectoryDataset::new(u, y, 1.0).unwrap(), n, n_p, stride).unwrap();
        let count = (t - n - n_p) / stride + 1;
        prop_assert_eq!(w.len(), count);
        prop_assert_eq!(w.histories.len(), n_p);
        prop_assert_eq!(w.inputs.len(), n);
        prop_assert_eq!(w.targets.len(), n);
        prop_assert!(w.histories.iter().all(|m| m.shape() == (count, 3)));
        prop_assert!(w.inputs.iter().all(|m| m.shape() == (count, 2)));
        // The last target of the last window is inside the series.
        let last = w.starts[count - 1] + n_p + n - 1;
        prop_assert!(last < t);
    }

    #[test]
    fn rollout_shapes_match_horizon(class in class_strategy(), n in 1usize..6, batch in 1usize..5, seed in 0u64..1000) {
        let model = BlockSsm::new(&model_config(class), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hist: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, batch, 3)).collect();
        let inputs: Vec<Matrix> = (0..n).map(|_| random_matrix(&mut rng, batch, 2)).collect();
        let r = model.simulate(&hist, &inputs).unwrap();
        prop_assert_eq!(r.x0.shape(), (batch, 4));
        prop_assert_eq!(r.states.len(), n);
        prop_assert!(r.predictions.iter().all(|p| p.shape() == (batch, 3)));
        prop_assert_eq!(r.fu_contributions.len(), if class.is_structured() { n } else { 0 });
    }

    #[test]
    fn input_block_enters_additively(class in class_strategy(), seed in 0u64..1000) {
        prop_assume!(class.is_structured());
        let mut model = BlockSsm::new(&model_config(class), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hist: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 3, 3)).collect();
        let inputs = vec![random_matrix(&mut rng, 3, 2)];
        let before = model.simulate(&hist, &inputs).unwrap();
        let fu_ids = model.fu().unwrap().param_ids();
        for id in fu_ids {
            let (r, c) = model.params().value(id).shape();
            let noise = random_matrix(&mut rng, r, c);
            let v = model.params_mut().value_mut(id);
            *v = v.add(&noise).unwrap();
        }
        let after = model.simulate(&hist, &inputs).unwrap();
        let autonomous = |r: &blockssm::ssm::RolloutValues| r.states[0].sub(&r.fu_contributions[0]).unwrap();
        let diff = autonomous(&before).sub(&autonomous(&after)).unwrap().max_abs();
        prop_assert!(diff < 1e-12, "f_x part moved by {diff}");
        prop_assert!(before.fu_contributions[0] != after.fu_contributions[0]);
    }
}

#[test]
fn components_follow_the_class_table() {
    for class in ModelClass::ALL {
        let model = BlockSsm::new(&model_config(class), 0).unwrap();
        let lin = class.linearity();
        assert_eq!(model.fy().config().is_linear(), lin.fy, "{class:?} f_y");
        match (model.fx(), model.fu(), model.fxu()) {
            (Some(fx), Some(fu), None) => {
                assert!(class.is_structured());
                assert_eq!(fx.config().is_linear(), lin.fx, "{class:?} f_x");
                assert_eq!(fu.config().is_linear(), lin.fu, "{class:?} f_u");
            }
            (None, None, Some(fxu)) => {
                assert_eq!(class, ModelClass::Unstructured);
                assert!(!fxu.config().is_linear());
                assert_eq!(fxu.in_dim(), 4 + 2);
            }
            _ => panic!("{class:?} has an inconsistent component set"),
        }
    }
}

#[test]
fn linear_class_is_linear_in_state_and_input() {
    let mut cfg = model_config(ModelClass::Linear);
    cfg.observer = BlockConfig::linear(LinMapKind::Dense, None);
    let model = BlockSsm::new(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hist: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 1, 3)).collect();
    let u1 = vec![random_matrix(&mut rng, 1, 2); 3];
    let u2 = vec![random_matrix(&mut rng, 1, 2); 3];
    let sum: Vec<Matrix> = u1.iter().zip(&u2).map(|(a, b)| a.add(b).unwrap()).collect();
    let zero = vec![Matrix::zeros(1, 2); 3];
    let p = |u: &[Matrix]| model.simulate(&hist, u).unwrap().predictions[2].clone();
    // y(u1 + u2) − y(0) = (y(u1) − y(0)) + (y(u2) − y(0)) for an affine system.
    let lhs = p(&sum).sub(&p(&zero)).unwrap();
    let rhs = p(&u1).sub(&p(&zero)).unwrap().add(&p(&u2).sub(&p(&zero)).unwrap()).unwrap();
    assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
}
