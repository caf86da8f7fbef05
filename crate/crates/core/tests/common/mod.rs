#![allow(dead_code)]

use sfn_core::geometry::Vec2;

/// Crossing abscissae of a closed polygon with the horizontal line `y`,
/// paired into inside intervals.
pub fn scanline_intervals(poly: &[Vec2], y: f64) -> Vec<(f64, f64)> {
    let n = poly.len();
    let mut xs = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.y <= y) != (b.y <= y) {
            xs.push(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

fn rot(p: Vec2, x: f64, y: f64, theta_deg: f64) -> Vec2 {
    let t = theta_deg * std::f64::consts::PI / 180.0;
    Vec2::new(
        p.x * t.cos() - p.y * t.sin() + x,
        p.x * t.sin() + p.y * t.cos() + y,
    )
}

/// Pixel-mask containment: every pixel centre of the posed peg, on a grid of
/// pitch `h` mm, must be a pixel centre of the hole.
pub fn raster_contained(
    peg: &[Vec2],
    hole: &[Vec2],
    x: f64,
    y: f64,
    theta_deg: f64,
    h: f64,
) -> bool {
    let posed: Vec<Vec2> = peg.iter().map(|&p| rot(p, x, y, theta_deg)).collect();
    let ymin = posed.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let ymax = posed.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let r0 = (ymin / h - 0.5).floor() as i64;
    let r1 = (ymax / h - 0.5).ceil() as i64;
    for r in r0..=r1 {
        let yc = (r as f64 + 0.5) * h;
        let holes = scanline_intervals(hole, yc);
        for (a, b) in scanline_intervals(&posed, yc) {
            let c0 = (a / h - 0.5).ceil() as i64;
            let c1 = (b / h - 0.5).floor() as i64;
            for c in c0..=c1 {
                let xc = (c as f64 + 0.5) * h;
                if !holes.iter().any(|&(u, v)| xc >= u && xc <= v) {
                    return false;
                }
            }
        }
    }
    true
}

/// Spiral trace: tick positions relative to the start, following the
/// recurrence `φ ← φ + min(Δ, s / r(φ))`, `r(φ) = pitch·φ / 2π`, up to
/// `max_radius`.
pub fn spiral_trace(pitch: f64, step_deg: f64, max_arc: f64, max_radius: f64) -> Vec<(f64, f64)> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let delta = step_deg * std::f64::consts::PI / 180.0;
    let mut out = Vec::new();
    let mut phi = 0.0f64;
    loop {
        let r = pitch * phi / two_pi;
        phi += if r > 0.0 {
            delta.min(max_arc / r)
        } else {
            delta
        };
        let r = pitch * phi / two_pi;
        if r > max_radius {
            return out;
        }
        out.push((r * phi.cos(), r * phi.sin()));
    }
}

/// `e^{-d}` as the reciprocal of the positive Taylor series of `e^{d}`.
pub fn exp_neg_series(d: f64) -> f64 {
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..80 {
        term *= d / k as f64;
        sum += term;
    }
    1.0 / sum
}

/// Summed binary cross-entropy written as the negative log of a likelihood
/// product (targets in {0, 1} or soft).
pub fn bce_product(pred: &[f64], target: &[f64]) -> f64 {
    let lik: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| p.powf(t) * (1.0 - p).powf(1.0 - t))
        .product();
    -lik.ln()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Expected spiral tick count for a square peg translated by `start` with
/// zero rotation. Translated containment in the rounded offset square holds
/// iff the offset lies inside the corner arc, which is polygonised with
/// eight segments per quarter turn, so the boundary lies between
/// `c·cos(π/32)` and `c`. Returns `None` when a visited point falls in that
/// band before the first point that is certainly inside.
pub fn spiral_expected_ticks(
    start: (f64, f64),
    c: f64,
    trace: &[(f64, f64)],
) -> Option<Option<usize>> {
    let inner = c * (std::f64::consts::PI / 32.0).cos();
    let classify = |x: f64, y: f64| {
        let r = x.hypot(y);
        if r < inner - 1e-9 {
            Some(true)
        } else if r > c + 1e-9 {
            Some(false)
        } else {
            None
        }
    };
    if classify(start.0, start.1)? {
        return Some(Some(0));
    }
    for (k, &(ox, oy)) in trace.iter().enumerate() {
        if classify(start.0 + ox, start.1 + oy)? {
            return Some(Some(k + 1));
        }
    }
    Some(None)
}
