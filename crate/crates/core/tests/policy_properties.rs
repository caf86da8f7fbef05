mod common;

use common::rel_err;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_core::datagen::{BANK_CENTER, BANK_SIZE};
use sfn_core::perception::{
    orientation_target, position_target_for_pose, OrientationHeatmap, GRID_N,
};
use sfn_core::policy::{
    discounted_returns, policy_gradient_loss, reward, sfss_action, ActionSpec, EpisodeRecord,
    RewardConfig, StepRecord,
};
use sfn_core::render::CameraModel;
use sfn_core::sim::Pose;
use sfn_nn::{Graph, Tensor};

fn ideal_orientation(pose: &Pose) -> OrientationHeatmap {
    let k = orientation_target(pose) as f64;
    let d: Vec<f64> = (0..BANK_SIZE).map(|i| (i as f64 - k).abs()).collect();
    OrientationHeatmap::from_distances(&d).unwrap()
}

#[test]
fn argmax_controller_inverts_ideal_heatmaps() {
    let camera = CameraModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let reach = (GRID_N / 2) as f64 / camera.px_per_mm;
    let reach_deg = BANK_CENTER as f64 * 2.0;
    for _ in 0..500 {
        let pose = Pose::planar(
            rng.random_range(-reach..reach),
            rng.random_range(-reach..reach),
            rng.random_range(-reach_deg..reach_deg),
        );
        let phi = position_target_for_pose(&pose, &camera, GRID_N);
        let a = sfss_action(&phi, &ideal_orientation(&pose), &camera);
        assert!((pose.x + a.dx).abs() <= 0.25 + 1e-12, "{pose:?} {a:?}");
        assert!((pose.y + a.dy).abs() <= 0.25 + 1e-12, "{pose:?} {a:?}");
        assert!(
            (pose.theta + a.dtheta).abs() <= 1.0 + 1e-12,
            "{pose:?} {a:?}"
        );
    }
}

#[test]
fn reward_hand_cases() {
    let cfg = RewardConfig::default();
    let cases = [
        (true, 0.0, 0.0, 1.0),
        (true, 2.0, 3.0, 0.95),
        (false, 0.0, 0.0, -0.05),
        (false, 1.0, 1.0, -0.07),
        (false, 0.5, 0.25, -0.0575),
        (true, 0.1, 0.0, 0.999),
    ];
    for (s, lp, lo, want) in cases {
        assert!(rel_err(reward(s, lp, lo, &cfg), want) < 1e-9);
    }
}

#[test]
fn discounted_returns_hand_case() {
    let r = discounted_returns(&[1.0, 0.0, -1.0, 2.0], 0.5);
    let want = [1.0 + 0.0 - 0.25 + 0.25, 0.0 - 0.5 + 0.5, -1.0 + 1.0, 2.0];
    for (a, b) in r.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn policy_gradient_loss_gradient_is_weighted_mean() {
    let adv = [1.5f32, -0.5, 0.25, 2.0];
    let mut g = Graph::new();
    let logp = g.input(Tensor::new(&[4], vec![-0.1, -2.0, -0.7, -1.2]));
    let loss = policy_gradient_loss(&mut g, logp, &adv);
    let want = -(-0.1 * 1.5 + -2.0 * -0.5 + -0.7 * 0.25 + -1.2 * 2.0) / 4.0;
    assert!((g.value(loss).item() as f64 - want).abs() < 1e-6);
    let (_, inputs) = g.backward_with_inputs(loss);
    for (gv, a) in inputs[&logp.index()].data().iter().zip(adv) {
        assert!((gv + a / 4.0).abs() < 1e-7);
    }
}

fn sample_record(rng: &mut ChaCha8Rng) -> EpisodeRecord {
    let camera = CameraModel::default();
    let n = rng.random_range(0..6);
    let steps = (0..n)
        .map(|k| StepRecord {
            step: k + 1,
            pose: Pose::planar(rng.random(), rng.random(), rng.random()),
            action: ActionSpec::from_indices(
                rng.random_range(0..GRID_N),
                rng.random_range(0..GRID_N),
                rng.random_range(0..BANK_SIZE),
                GRID_N,
                &camera,
            ),
            reward: rng.random_range(-1.0..1.0),
            loss_pos: rng.random(),
            loss_ori: rng.random(),
            success: k + 1 == n,
            occluded: k == 0,
            contact_force: rng.random(),
        })
        .collect();
    EpisodeRecord {
        policy: "sfms".into(),
        shape_id: "triangle".into(),
        clearance: 0.8,
        seed: rng.random(),
        initial_pose: Pose::planar(rng.random(), rng.random(), rng.random()),
        steps,
        success: n > 0,
        final_pose: Pose::planar(rng.random(), rng.random(), rng.random()),
    }
}

proptest! {
    #[test]
    fn reward_bounds(s in any::<bool>(), lp in 0.0f64..10.0, lo in 0.0f64..2.0) {
        let cfg = RewardConfig::default();
        let r = reward(s, lp, lo, &cfg);
        if s {
            prop_assert!(r <= 1.0 && r >= 1.0 - 0.01 * 12.0);
        } else {
            prop_assert!(r <= -0.05 && r >= -0.05 - 0.01 * 12.0);
        }
    }

    #[test]
    fn episode_log_roundtrip(seed in any::<u64>()) {
        let rec = sample_record(&mut ChaCha8Rng::seed_from_u64(seed));
        let back = EpisodeRecord::from_jsonl(&rec.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(back, rec);
    }

    #[test]
    fn returns_satisfy_bellman(rs in prop::collection::vec(-1.0f64..1.0, 1..30), gamma in 0.0f64..1.0) {
        let g = discounted_returns(&rs, gamma);
        for t in 0..rs.len() {
            let next = if t + 1 < rs.len() { g[t + 1] } else { 0.0 };
            prop_assert!((g[t] - (rs[t] + gamma * next)).abs() < 1e-9);
        }
    }
}
