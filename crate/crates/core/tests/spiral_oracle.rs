mod common;

use common::{spiral_expected_ticks, spiral_trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_core::baselines::{spiral_search, SpiralConfig};
use sfn_core::shapes::shape_by_id;
use sfn_core::sim::{Env, EnvConfig, Pose};

#[test]
fn spiral_matches_trace_oracle() {
    let c = 0.6;
    let cfg = SpiralConfig::default();
    let trace = spiral_trace(cfg.pitch, cfg.angular_step, cfg.max_arc, cfg.max_radius);
    let mut env = Env::new(EnvConfig::new(shape_by_id("square", c).unwrap())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut done = 0;
    while done < 500 {
        let (r, a) = (
            11.0 * rng.random::<f64>().sqrt(),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let start = (r * a.cos(), r * a.sin());
        let Some(want) = spiral_expected_ticks(start, c, &trace) else {
            continue;
        };
        env.reset_to(Pose::planar(start.0, start.1, 0.0)).unwrap();
        let rec = spiral_search(&env, &cfg).unwrap();
        assert_eq!(
            want,
            Some(rec.len()).filter(|_| rec.success),
            "start {start:?}"
        );
        assert!(rec.success, "start {start:?}");
        done += 1;
    }
}
