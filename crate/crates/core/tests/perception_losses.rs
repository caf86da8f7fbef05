mod common;

use common::{bce_product, central_diff, exp_neg_series, rel_err};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_core::perception::position::bce_with_logits;
use sfn_core::perception::{
    bce_heatmap_grad, bce_heatmap_loss, contrastive_grad, contrastive_loss,
    contrastive_loss_batched, make_position_target, similarity,
};
use sfn_nn::{Graph, Tensor};

#[test]
fn position_target_is_one_hot_at_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let (dx, dy) = (rng.random_range(-20i64..=20), rng.random_range(-20i64..=20));
        let hm = make_position_target(dx, dy, 41).unwrap();
        for i in 0..41 {
            for j in 0..41 {
                let hot = i as i64 == dx + 20 && j as i64 == dy + 20;
                assert_eq!(hm.get(i, j), hot as u8 as f32);
            }
        }
    }
    assert!(make_position_target(21, 0, 41).is_err());
    assert!(make_position_target(0, -21, 41).is_err());
}

#[test]
fn bce_matches_likelihood_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let n = rng.random_range(1..9);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..1.0f64).round())
            .collect();
        assert!(rel_err(bce_heatmap_loss(&p, &t), bce_product(&p, &t)) < 1e-9);
    }
}

#[test]
fn similarity_matches_series() {
    for k in 0..40 {
        let d = k as f64 * 0.2;
        assert!(rel_err(similarity(d), exp_neg_series(d)) < 1e-9);
    }
}

#[test]
fn batched_contrastive_hand_example() {
    let hm = [0.9, 0.2, 0.5, 0.95, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    // negatives: 0.2 -> 0.3, 0.5 -> 0.6, 0.95 -> 1.05, seven zeros -> 0.1 each
    let want = (0.3 + 0.6 + 1.05 + 7.0 * 0.1) / 10.0;
    assert!(rel_err(contrastive_loss_batched(&hm, 0), want) < 1e-9);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let p: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = bce_heatmap_grad(&p, &t);
        let f = |x: &[f64]| bce_heatmap_loss(x, &t);
        for i in 0..6 {
            assert!(rel_err(g[i], central_diff(&f, &p, i, 1e-6)) < 1e-4);
        }
    }
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut n = 0;
    while n < 10 {
        let x: [f64; 2] = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        if (x[1] - x[0] + 1.0).abs() < 1e-3 {
            continue;
        }
        let f = |v: &[f64]| contrastive_loss(v[0], v[1]);
        let (gp, gn) = contrastive_grad(x[0], x[1]);
        assert!((gp - central_diff(&f, &x, 0, 1e-6)).abs() < 1e-6);
        assert!((gn - central_diff(&f, &x, 1, 1e-6)).abs() < 1e-6);
        n += 1;
    }
}

#[test]
fn logit_bce_op_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let logits: Vec<f32> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target: Vec<f32> = (0..8)
            .map(|_| rng.random_range(0.0..1.0f32).round())
            .collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[8], logits.clone()));
        let loss = bce_with_logits(&mut g, x, &target);
        let (_, inputs) = g.backward_with_inputs(loss);
        let grad = &inputs[&x.index()];
        let eval = |l: &[f64]| {
            l.iter()
                .zip(&target)
                .map(|(&z, &t)| {
                    let p = 1.0 / (1.0 + (-z).exp());
                    -(t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
                })
                .sum::<f64>()
        };
        let l64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        for i in 0..8 {
            let fd = central_diff(&eval, &l64, i, 1e-5);
            assert!((grad.data()[i] as f64 - fd).abs() < 1e-4 * fd.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn contrastive_is_nonnegative_hinge(dp in 0.0f64..1.0, dn in 0.0f64..1.0) {
        let l = contrastive_loss(dp, dn);
        prop_assert!(l >= 0.0);
        prop_assert!(l <= 2.0);
        prop_assert!((l - (dn - dp + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_is_nonnegative(p in prop::collection::vec(0.0f64..1.0, 1..20), bit in any::<u32>()) {
        let t: Vec<f64> = (0..p.len()).map(|i| ((bit >> (i % 32)) & 1) as f64).collect();
        prop_assert!(bce_heatmap_loss(&p, &t) >= 0.0);
    }
}
