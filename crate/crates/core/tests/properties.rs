//! Property tests over randomized graphs, images and models.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wtkr::attacks::{self, AttackConfig};
use wtkr::calculus::{self, GradientVector, TangentVector};
use wtkr::checkpoint::{self, CheckpointMeta};
use wtkr::graph::{ImageMassVector, LaplacianState, WeightRule, WeightedPixelGraph};
use wtkr::model::{Head, LossKind, ModelParams};
use wtkr::noise::{sample_noise, NoiseConfig};

fn graph_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..3).prop_filter("at least one edge", |(h, w, _)| h * w >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_form_is_nonnegative_and_symmetric(
        (h, w, r) in graph_strategy(),
        seed in any::<u64>(),
    ) {
        let graph = Arc::new(WeightedPixelGraph::grid(h, w, r, WeightRule::Constant).unwrap());
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = ImageMassVector::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect(), h, w, 1).unwrap();
        let l = LaplacianState::build(graph, &x, 1e-6).unwrap();
        let u = GradientVector::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), 1).unwrap();
        let v = GradientVector::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), 1).unwrap();
        let quu = calculus::quadratic_form(&l, &u, &u).unwrap();
        prop_assert!(quu >= 0.0);
        let quv = calculus::quadratic_form(&l, &u, &v).unwrap();
        let qvu = calculus::quadratic_form(&l, &v, &u).unwrap();
        prop_assert!((quv - qvu).abs() <= 1e-12 * (1.0 + quv.abs()));
    }

    #[test]
    fn noise_samples_are_exactly_tangent(
        (h, w, r) in graph_strategy(),
        seed in any::<u64>(),
        eta in 0.01f64..2.0,
    ) {
        let graph = Arc::new(WeightedPixelGraph::grid(h, w, r, WeightRule::Constant).unwrap());
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = ImageMassVector::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect(), h, w, 1).unwrap();
        let l = LaplacianState::build(graph, &x, 1e-6).unwrap();
        let cfg = NoiseConfig::with_floor(eta, seed, 1e-6).unwrap();
        for xi in sample_noise(&l, &cfg, 8).unwrap() {
            let sum: f64 = xi.values().iter().sum();
            prop_assert!(sum.abs() < 1e-12, "sum {sum}");
        }
    }

    #[test]
    fn christoffel_symmetry_and_tangency(
        seed in any::<u64>(),
    ) {
        let graph = Arc::new(WeightedPixelGraph::grid(1, 3, 1, WeightRule::Constant).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = ImageMassVector::new(
            (0..3).map(|_| rng.random_range(0.05..1.0)).collect(), 1, 3, 1,
        ).unwrap();
        let l = LaplacianState::build(graph, &x, 0.0).unwrap();
        let mk_tangent = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean: f64 = v.iter().sum::<f64>() / 3.0;
            v.iter_mut().for_each(|e| *e -= mean);
            TangentVector::new(v, 1).unwrap()
        };
        let s1 = mk_tangent(&mut rng);
        let s2 = mk_tangent(&mut rng);
        let g12 = calculus::christoffel(&l, &s1, &s2).unwrap();
        let g21 = calculus::christoffel(&l, &s2, &s1).unwrap();
        let scale = g12.values().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g12.values().iter().zip(g21.values()) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
        let sum: f64 = g12.values().iter().sum();
        prop_assert!(sum.abs() <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn iterated_attack_always_feasible(
        seed in any::<u64>(),
        epsilon in 0.0f64..0.2,
        steps in 1usize..8,
    ) {
        let m = ModelParams::init(4, &[5], 3, Head::Softmax, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        use rand::Rng;
        let x = ImageMassVector::new(
            (0..4).map(|_| rng.random_range(0.0..1.0)).collect(), 2, 2, 1,
        ).unwrap();
        let y = [1.0, 0.0, 0.0];
        let cfg = AttackConfig::ifgsm(epsilon, (epsilon / 2.0).max(1e-3), steps);
        let adv = attacks::ifgsm(&m, &x, &y, LossKind::CrossEntropy, &cfg).unwrap();
        for (a, o) in adv.values().iter().zip(x.values()) {
            prop_assert!((a - o).abs() <= epsilon + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn checkpoint_round_trip_random_models(
        seed in any::<u64>(),
        hidden in 1usize..6,
        outputs in 1usize..5,
    ) {
        let params = ModelParams::init(3, &[hidden], outputs, Head::Softmax, seed).unwrap();
        let meta = CheckpointMeta { config_hash: format!("{seed:x}"), epoch: 1, seed };
        let bytes = checkpoint::to_bytes(&params, &meta);
        let (back, m2) = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back, &m2), bytes);
    }

    #[test]
    fn tangent_projection_is_idempotent(
        values in proptest::collection::vec(-10.0f64..10.0, 4),
    ) {
        let (proj, _) = TangentVector::project(values, 1).unwrap();
        let (again, moved) = TangentVector::project(proj.values().to_vec(), 1).unwrap();
        prop_assert!(!moved);
        for (a, b) in proj.values().iter().zip(again.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
