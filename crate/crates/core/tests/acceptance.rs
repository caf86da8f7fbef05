//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 3 to 8 read the full pipeline run in `runs/acceptance` at the
//! workspace root (override with `SFN_ACCEPTANCE_DIR`). Missing stages are
//! computed first, which takes hours on one core.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{
    bce_product, central_diff, exp_neg_series, rel_err, spiral_expected_ticks, spiral_trace,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfn_core::baselines::{spiral_search, SpiralConfig};
use sfn_core::bench::ResultTable;
use sfn_core::perception::{
    bce_heatmap_grad, bce_heatmap_loss, contrastive_grad, contrastive_loss, make_position_target,
    similarity,
};
use sfn_core::pipeline::{
    metrics_files, run_pipeline, stage_seconds, PipelineConfig, PipelineResults, RunDir,
};
use sfn_core::policy::{reward, RewardConfig};
use sfn_core::shapes::{shape_by_id, Family};
use sfn_core::sim::{Env, EnvConfig, Pose};

const EXACT_REL: f64 = 1e-9;
const ORACLE_CASES: usize = 20;
const GRAD_REL: f64 = 1e-4;
const GRAD_POINTS: usize = 10;
const SEG_IOU: f64 = 0.97;
const SEG_SAMPLES: usize = 200;
const SEG_EPOCHS: usize = 10;
const SEG_SECONDS: f64 = 600.0;
const POS_WITHIN_ONE: f64 = 0.95;
const ORI_TOP1: f64 = 0.90;
const RETENTION: f64 = 0.8;
const PERCEPTION_SECONDS: f64 = 1800.0;
const CONVERGE_GAP: f64 = 0.05;
const MAX_INVERSIONS: usize = 1;
const TOLERANCE_BAND: (f64, f64) = (0.6, 1.0);
const TOLERANCE_RATE: f64 = 0.8;
const OCCLUSION_EPISODES: usize = 50;
const E2E_GAP: f64 = 0.30;
const HEATMAP_GAP: f64 = 0.15;
const SPIRAL_CASES: usize = 500;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn c1_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut cases = [0usize; 5];
    for _ in 0..ORACLE_CASES {
        let (dx, dy) = (rng.random_range(-20i64..=20), rng.random_range(-20i64..=20));
        let hm = make_position_target(dx, dy, 41).expect("in range");
        let hot = ((dx + 20) * 41 + dy + 20) as usize;
        let ok = hm
            .values
            .iter()
            .enumerate()
            .all(|(k, &v)| v == (k == hot) as u8 as f32);
        worst = worst.max(if ok { 0.0 } else { 1.0 });
        cases[0] += 1;

        let n = rng.random_range(1..9);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0.0..1.0f64).round())
            .collect();
        worst = worst.max(rel_err(bce_heatmap_loss(&p, &t), bce_product(&p, &t)));
        cases[1] += 1;

        let d = rng.random_range(0.0..8.0);
        worst = worst.max(rel_err(similarity(d), exp_neg_series(d)));
        cases[2] += 1;

        let (dp, dn): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let want = if dn + 1.0 > dp { dn + 1.0 - dp } else { 0.0 };
        worst = worst.max(rel_err(contrastive_loss(dp, dn), want));
        cases[3] += 1;

        let (s, lp, lo) = (
            rng.random::<bool>(),
            rng.random_range(0.0..5.0),
            rng.random_range(0.0..2.0),
        );
        let want = if s {
            (100.0 - lp - lo) / 100.0
        } else {
            (-5.0 - lp - lo) / 100.0
        };
        worst = worst.max(rel_err(reward(s, lp, lo, &RewardConfig::default()), want));
        cases[4] += 1;
    }
    verdict(
        worst <= EXACT_REL && cases.iter().all(|&c| c >= ORACLE_CASES),
        format!("{cases:?} cases, worst relative error {worst:.2e}"),
    )
}

fn c2_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_POINTS {
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let t: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = bce_heatmap_grad(&p, &t);
        let f = |x: &[f64]| bce_heatmap_loss(x, &t);
        for (i, gi) in g.iter().enumerate() {
            worst = worst.max(rel_err(*gi, central_diff(&f, &p, i, 1e-6)));
        }
    }
    let mut points = 0;
    while points < GRAD_POINTS {
        let x: [f64; 2] = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        if (x[1] - x[0] + 1.0).abs() < 1e-3 {
            continue;
        }
        let f = |v: &[f64]| contrastive_loss(v[0], v[1]);
        let (gp, gn) = contrastive_grad(x[0], x[1]);
        for (i, gi) in [gp, gn].into_iter().enumerate() {
            let fd = central_diff(&f, &x, i, 1e-6);
            worst = worst.max(if gi == 0.0 && fd.abs() < 1e-9 {
                0.0
            } else {
                rel_err(gi, fd)
            });
        }
        points += 1;
    }
    verdict(
        worst < GRAD_REL,
        format!("{GRAD_POINTS} points per loss, worst relative error {worst:.2e}"),
    )
}

fn c3_segmentation(r: &PipelineResults, run: &RunDir) -> Verdict {
    let secs = stage_seconds(run, "segmentation").unwrap_or(f64::INFINITY);
    let samples = r.seg.train_samples + r.seg.val_samples;
    verdict(
        r.seg.val_mean_iou >= SEG_IOU
            && samples >= SEG_SAMPLES
            && r.seg.epoch_losses.len() == SEG_EPOCHS
            && secs <= SEG_SECONDS,
        format!(
            "val MeanIoU {:.4} (need {SEG_IOU}), {samples} samples, {} epochs, {secs:.0}s (limit {SEG_SECONDS}s)",
            r.seg.val_mean_iou,
            r.seg.epoch_losses.len()
        ),
    )
}

fn c4_perception(r: &PipelineResults, run: &RunDir) -> Verdict {
    let secs = stage_seconds(run, "position").unwrap_or(f64::INFINITY)
        + stage_seconds(run, "orientation").unwrap_or(f64::INFINITY);
    let (pos, ori) = (&r.pos, &r.ori);
    let pass = pos.val.within_one >= POS_WITHIN_ONE
        && ori.val.top1 >= ORI_TOP1
        && pos.unseen.within_one >= RETENTION * pos.val.within_one
        && ori.unseen.top1 >= RETENTION * ori.val.top1
        && secs <= PERCEPTION_SECONDS;
    verdict(
        pass,
        format!(
            "position ±1 {:.3} (unseen {:.3}), orientation top-1 {:.3} (unseen {:.3}), {secs:.0}s",
            pos.val.within_one, pos.unseen.within_one, ori.val.top1, ori.unseen.top1
        ),
    )
}

const HEATMAP_POLICIES: [&str; 3] = ["sfss", "sfms", "mfms"];

fn budget_rate(t: &ResultTable, policy: &str, family: Family, budget: f64) -> f64 {
    t.success_rate(policy, Some(family), budget, budget)
}

fn c5_convergence(r: &PipelineResults) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for p in HEATMAP_POLICIES {
        for fam in [Family::Seen, Family::Unseen] {
            let (a, b) = (
                budget_rate(&r.steps, p, fam, 5.0),
                budget_rate(&r.steps, p, fam, 20.0),
            );
            pass &= (b - a).abs() <= CONVERGE_GAP && a.is_finite() && b.is_finite();
            parts.push(format!("{p}/{fam:?} {a:.2}->{b:.2}"));
        }
    }
    verdict(pass, parts.join(", "))
}

fn c6_tolerance(r: &PipelineResults) -> Verdict {
    let mut pass = true;
    let mut best = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for m in r.tolerance.monotonicity_report() {
        pass &= m.inversions.len() <= MAX_INVERSIONS;
        let band = r
            .tolerance
            .success_rate(&m.policy, None, TOLERANCE_BAND.0, TOLERANCE_BAND.1);
        best = best.max(band);
        parts.push(format!(
            "{} inversions {} band {band:.2}",
            m.policy,
            m.inversions.len()
        ));
    }
    pass &= best >= TOLERANCE_RATE && !parts.is_empty();
    verdict(pass, parts.join(", "))
}

fn c7_occlusion(r: &PipelineResults) -> Verdict {
    let o = &r.occlusion;
    let enough = o.rows.len() == 3 && o.rows.iter().all(|row| row.trials >= OCCLUSION_EPISODES);
    let pass = enough && o.ordering_success == Some(true) && o.ordering_steps == Some(true);
    let parts: Vec<String> = o
        .rows
        .iter()
        .map(|row| {
            format!(
                "{} {:.2} in {:.2} steps (n={})",
                row.policy, row.success_rate, row.mean_steps, row.trials
            )
        })
        .collect();
    verdict(pass, parts.join(", "))
}

fn c8_generalization(r: &PipelineResults) -> Verdict {
    let gap = |p: &str| {
        budget_rate(&r.steps, p, Family::Seen, 20.0)
            - budget_rate(&r.steps, p, Family::Unseen, 20.0)
    };
    let (e, s, m) = (gap("e2e-vision"), gap("sfms"), gap("mfms"));
    verdict(
        e >= E2E_GAP && s.abs() <= HEATMAP_GAP && m.abs() <= HEATMAP_GAP,
        format!("seen-unseen gap: e2e-vision {e:.2}, sfms {s:.2}, mfms {m:.2}"),
    )
}

fn c9_spiral() -> Verdict {
    let c = 0.6;
    let cfg = SpiralConfig::default();
    let trace = spiral_trace(cfg.pitch, cfg.angular_step, cfg.max_arc, cfg.max_radius);
    let mut env = Env::new(EnvConfig::new(
        shape_by_id("square", c).expect("library shape"),
    ))
    .expect("valid env");
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (mut cases, mut successes, mut matches) = (0, 0, 0);
    while cases < SPIRAL_CASES {
        let (rad, a) = (
            11.0 * rng.random::<f64>().sqrt(),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let start = (rad * a.cos(), rad * a.sin());
        let Some(want) = spiral_expected_ticks(start, c, &trace) else {
            continue;
        };
        env.reset_to(Pose::planar(start.0, start.1, 0.0))
            .expect("reset");
        let rec = spiral_search(&env, &cfg).expect("spiral");
        cases += 1;
        successes += rec.success as usize;
        matches += (want == Some(rec.len()).filter(|_| rec.success)) as usize;
    }
    verdict(
        successes == cases && matches == cases,
        format!("{successes}/{cases} succeeded, {matches}/{cases} tick counts match"),
    )
}

fn c10_determinism() -> Verdict {
    let run = || -> sfn_core::Result<Vec<(String, Vec<u8>)>> {
        let dir = tempfile::tempdir()?;
        run_pipeline(dir.path(), &PipelineConfig::smoke(5), &mut |_| {})?;
        metrics_files(dir.path())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.as_str())
                .collect();
            verdict(
                a.len() == b.len() && differing.is_empty() && !a.is_empty(),
                format!("{} metrics files, differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => verdict(false, format!("smoke pipeline failed: {e}")),
    }
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("SFN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../runs/acceptance"))
}

fn main() {
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!(
            "criterion {n}: {} ({})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        verdicts.push((n, v));
    };
    report(1, c1_exactness());
    report(2, c2_gradients());

    let root = acceptance_dir();
    let t = Instant::now();
    match run_pipeline(&root, &PipelineConfig::default(), &mut |m| {
        eprintln!("[pipeline] {m}")
    }) {
        Ok(r) => {
            let run = RunDir::new(&root);
            report(3, c3_segmentation(&r, &run));
            report(4, c4_perception(&r, &run));
            report(5, c5_convergence(&r));
            report(6, c6_tolerance(&r));
            report(7, c7_occlusion(&r));
            report(8, c8_generalization(&r));
        }
        Err(e) => {
            for n in 3..=8 {
                report(
                    n,
                    verdict(false, format!("pipeline in {} failed: {e}", root.display())),
                );
            }
        }
    }
    eprintln!(
        "[acceptance] pipeline artifacts ready after {:.0}s",
        t.elapsed().as_secs_f64()
    );
    report(9, c9_spiral());
    report(10, c10_determinism());

    let failed: Vec<usize> = verdicts
        .iter()
        .filter(|(_, v)| !v.pass)
        .map(|(n, _)| *n)
        .collect();
    println!(
        "acceptance: {}/{} criteria pass",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
