mod common;

use common::raster_contained;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_core::shapes::{shape_by_id, SEEN_IDS, UNSEEN_IDS};
use sfn_core::sim::{check_success, Action, Env, EnvConfig, Pose};

const PIXEL_MM: f64 = 0.05;

fn all_ids() -> Vec<&'static str> {
    SEEN_IDS.iter().chain(UNSEEN_IDS.iter()).copied().collect()
}

/// Same verdict under small pose perturbations, so the pixel oracle is not
/// fooled by sub-pixel margins.
fn robust(shape: &sfn_core::shapes::ShapeSpec, pose: &Pose) -> bool {
    let base = check_success(shape, pose);
    let (dp, dt) = (0.15, 0.3);
    [
        (dp, 0.0, 0.0),
        (-dp, 0.0, 0.0),
        (0.0, dp, 0.0),
        (0.0, -dp, 0.0),
        (0.0, 0.0, dt),
        (0.0, 0.0, -dt),
    ]
    .iter()
    .all(|&(ax, ay, at)| {
        check_success(
            shape,
            &Pose::planar(pose.x + ax, pose.y + ay, pose.theta + at),
        ) == base
    })
}

#[test]
fn containment_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids = all_ids();
    let (mut checked, mut successes, mut n) = (0, 0, 0);
    while n < 1000 {
        n += 1;
        let id = ids[rng.random_range(0..ids.len())];
        let c = [0.5, 1.0][rng.random_range(0..2)];
        let shape = shape_by_id(id, c).unwrap();
        let pose = Pose::planar(
            rng.random_range(-1.2 * c..1.2 * c),
            rng.random_range(-1.2 * c..1.2 * c),
            rng.random_range(-4.0..4.0),
        );
        if !robust(&shape, &pose) {
            continue;
        }
        let got = check_success(&shape, &pose);
        let want = raster_contained(
            &shape.peg_polygon,
            &shape.hole_polygon,
            pose.x,
            pose.y,
            pose.theta,
            PIXEL_MM,
        );
        assert_eq!(got, want, "{id} c={c} pose={pose:?}");
        checked += 1;
        successes += got as usize;
    }
    assert!(checked >= 700, "only {checked} unambiguous cases");
    assert!(
        successes > 50 && successes < checked - 50,
        "{successes}/{checked} successes"
    );
}

#[test]
fn aligned_pose_succeeds_for_every_shape() {
    for id in all_ids() {
        let shape = shape_by_id(id, 0.1).unwrap();
        assert!(check_success(&shape, &Pose::planar(0.0, 0.0, 0.0)), "{id}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn larger_clearance_never_loses_success(
        k in 0usize..14,
        c in 0.1f64..1.0,
        extra in 0.05f64..0.5,
        x in -1.5f64..1.5,
        y in -1.5f64..1.5,
        t in -5.0f64..5.0,
    ) {
        let id = all_ids()[k];
        let pose = Pose::planar(x, y, t);
        let tight = shape_by_id(id, c).unwrap();
        let loose = shape_by_id(id, c + extra).unwrap();
        if check_success(&tight, &pose) {
            prop_assert!(check_success(&loose, &pose));
        }
    }

    #[test]
    fn actions_move_at_most_the_bound(
        dx in -50.0f64..50.0,
        dy in -50.0f64..50.0,
        dt in -50.0f64..50.0,
    ) {
        let cfg = EnvConfig::new(shape_by_id("square", 1.0).unwrap());
        let (bm, bd) = (cfg.action_bound_mm, cfg.action_bound_deg);
        let mut env = Env::new(cfg).unwrap();
        let (start, _) = env.reset_to(Pose::planar(3.0, -3.0, 7.0)).unwrap();
        let (after, _) = env.step(Action::new(dx, dy, dt)).unwrap();
        prop_assert!((after.x - start.x).abs() <= bm + 1e-12);
        prop_assert!((after.y - start.y).abs() <= bm + 1e-12);
        prop_assert!((after.x - start.x - dx.clamp(-bm, bm)).abs() < 1e-9);
        let turned = after.theta - start.theta;
        prop_assert!((turned - dt.clamp(-bd, bd)).abs() < 1e-9);
    }
}

#[test]
fn same_seed_same_episode() {
    let run = || {
        let mut env = Env::new(EnvConfig::new(shape_by_id("hexagon", 1.0).unwrap())).unwrap();
        let (p0, r0) = env.reset(99).unwrap();
        let (p1, r1) = env.step(Action::new(0.5, -0.25, 2.0)).unwrap();
        (p0, r0, p1, r1)
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_differ() {
    let mut env = Env::new(EnvConfig::new(shape_by_id("square", 1.0).unwrap())).unwrap();
    let (a, _) = env.reset(1).unwrap();
    let (b, _) = env.reset(2).unwrap();
    assert_ne!(a, b);
}
