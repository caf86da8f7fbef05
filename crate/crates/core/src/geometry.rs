//! Planar polygon utilities in millimetres.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise rotation by `deg` degrees.
    pub fn rotate(self, deg: f64) -> Vec2 {
        let (s, c) = deg.to_radians().sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

pub type Polygon = Vec<Vec2>;

/// Shoelace area, positive for counter-clockwise order.
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i].cross(poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

pub fn centroid(poly: &[Vec2]) -> Vec2 {
    let n = poly.len();
    let a = signed_area(poly);
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let w = p.cross(q);
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    Vec2::new(cx / (6.0 * a), cy / (6.0 * a))
}

/// Forces counter-clockwise order and moves the area centroid to the origin.
pub fn normalize_polygon(mut poly: Polygon) -> Polygon {
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    let c = centroid(&poly);
    poly.into_iter().map(|p| p.sub(c)).collect()
}

fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// True when no two non-adjacent edges cross and no edge is degenerate.
pub fn is_simple(poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if poly[i].sub(poly[(i + 1) % n]).norm() < 1e-12 {
            return false;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Even-odd ray casting. Boundary points may fall on either side.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance from `p` to the segment `ab`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.sub(a.add(ab.scale(t))).norm()
}

/// Distance from `p` to the polygon boundary.
pub fn boundary_distance(p: Vec2, poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Rigid motion: rotate by `theta_deg` about the origin, then translate.
pub fn transform(poly: &[Vec2], x: f64, y: f64, theta_deg: f64) -> Polygon {
    let (s, c) = theta_deg.to_radians().sin_cos();
    poly.iter()
        .map(|p| Vec2::new(c * p.x - s * p.y + x, s * p.x + c * p.y + y))
        .collect()
}

/// Outward offset of a counter-clockwise polygon by `d`. Convex corners get
/// circular arcs with `arc_segments` segments per full turn; reflex corners
/// use the miter point of the two offset edges.
pub fn offset_polygon(poly: &[Vec2], d: f64, arc_segments: usize) -> Polygon {
    let n = poly.len();
    let normal = |i: usize| {
        let e = poly[(i + 1) % n].sub(poly[i]);
        Vec2::new(e.y, -e.x).scale(1.0 / e.norm())
    };
    let step = std::f64::consts::TAU / arc_segments as f64;
    let mut out = Vec::new();
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let (n0, n1) = (normal(prev), normal(i));
        let v = poly[i];
        let turn = n0.cross(n1);
        if turn > 1e-12 {
            let a0 = n0.y.atan2(n0.x);
            let mut sweep = n1.y.atan2(n1.x) - a0;
            if sweep < 0.0 {
                sweep += std::f64::consts::TAU;
            }
            let k = (sweep / step).ceil().max(1.0) as usize;
            for s in 0..=k {
                let a = a0 + sweep * s as f64 / k as f64;
                out.push(Vec2::new(v.x + d * a.cos(), v.y + d * a.sin()));
            }
        } else if turn < -1e-12 {
            // Miter: intersection of the two offset lines.
            let bis = n0.add(n1);
            let scale = d * 2.0 / bis.dot(bis);
            out.push(v.add(bis.scale(scale)));
        } else {
            out.push(v.add(n1.scale(d)));
        }
    }
    out
}

pub fn bbox(poly: &[Vec2]) -> (Vec2, Vec2) {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poly {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

/// Largest distance of a vertex from the origin.
pub fn radius(poly: &[Vec2]) -> f64 {
    poly.iter().map(|p| p.norm()).fold(0.0, f64::max)
}
