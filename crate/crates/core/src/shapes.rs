//! Peg cross-sections and their clearance holes.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfnError};
use crate::geometry::{
    boundary_distance, is_simple, normalize_polygon, offset_polygon, point_in_polygon, Polygon,
    Vec2,
};

pub const SHAPE_MANIFEST_VERSION: u32 = 1;
/// Segments per full turn used to polygonise the rounded hole corners.
pub const ARC_SEGMENTS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub id: String,
    pub peg_polygon: Polygon,
    pub hole_polygon: Polygon,
    pub clearance: f64,
    pub family: Family,
}

impl ShapeSpec {
    /// Normalises `peg` (counter-clockwise, centroid at the origin) and builds
    /// the hole by offsetting it outward by `clearance`.
    pub fn new(id: &str, family: Family, peg: Polygon, clearance: f64) -> Result<Self> {
        if !(clearance > 0.0 && clearance.is_finite()) {
            return Err(SfnError::Config(format!(
                "clearance must be positive, got {clearance}"
            )));
        }
        if !is_simple(&peg) {
            return Err(SfnError::Config(format!(
                "peg polygon `{id}` is not simple"
            )));
        }
        let peg = normalize_polygon(peg);
        let hole = offset_polygon(&peg, clearance, ARC_SEGMENTS);
        if !is_simple(&hole) {
            return Err(SfnError::Config(format!(
                "hole for `{id}` self-intersects at clearance {clearance}"
            )));
        }
        Ok(Self {
            id: id.to_string(),
            peg_polygon: peg,
            hole_polygon: hole,
            clearance,
            family,
        })
    }

    pub fn with_clearance(&self, clearance: f64) -> Result<Self> {
        Self::new(&self.id, self.family, self.peg_polygon.clone(), clearance)
    }

    /// Smallest distance from a peg vertex to the hole boundary; equals the
    /// clearance for a well-formed pair.
    pub fn min_vertex_gap(&self) -> f64 {
        self.peg_polygon
            .iter()
            .map(|p| boundary_distance(*p, &self.hole_polygon))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn peg_inside_hole(&self) -> bool {
        self.peg_polygon
            .iter()
            .all(|p| point_in_polygon(*p, &self.hole_polygon))
    }
}

pub const SEEN_IDS: [&str; 4] = ["square", "circle", "triangle", "hexagon"];
pub const UNSEEN_IDS: [&str; 10] = [
    "cross",
    "l-shape",
    "t-shape",
    "u-shape",
    "star5",
    "rounded-square",
    "semicircle",
    "trapezoid",
    "h-shape",
    "notched-square",
];

fn regular(n: usize, r: f64, phase: f64) -> Polygon {
    (0..n)
        .map(|k| {
            let a = phase + TAU * k as f64 / n as f64;
            Vec2::new(r * a.cos(), r * a.sin())
        })
        .collect()
}

fn pts(v: &[(f64, f64)]) -> Polygon {
    v.iter().map(|&(x, y)| Vec2::new(x, y)).collect()
}

/// Peg outline for a library id, before normalisation.
pub fn peg_outline(id: &str) -> Option<Polygon> {
    let p = match id {
        "square" => pts(&[(-10.0, -10.0), (10.0, -10.0), (10.0, 10.0), (-10.0, 10.0)]),
        "circle" => regular(16, 10.0, 0.0),
        "triangle" => regular(3, 22.0 / 3f64.sqrt(), PI / 2.0),
        "hexagon" => regular(6, 11.0, 0.0),
        "cross" => pts(&[
            (-4.0, -11.0),
            (4.0, -11.0),
            (4.0, -4.0),
            (11.0, -4.0),
            (11.0, 4.0),
            (4.0, 4.0),
            (4.0, 11.0),
            (-4.0, 11.0),
            (-4.0, 4.0),
            (-11.0, 4.0),
            (-11.0, -4.0),
            (-4.0, -4.0),
        ]),
        "l-shape" => pts(&[
            (-10.0, -10.0),
            (10.0, -10.0),
            (10.0, -2.0),
            (-2.0, -2.0),
            (-2.0, 10.0),
            (-10.0, 10.0),
        ]),
        "t-shape" => pts(&[
            (-4.0, -10.0),
            (4.0, -10.0),
            (4.0, 3.0),
            (11.0, 3.0),
            (11.0, 10.0),
            (-11.0, 10.0),
            (-11.0, 3.0),
            (-4.0, 3.0),
        ]),
        "u-shape" => pts(&[
            (-10.0, -9.0),
            (10.0, -9.0),
            (10.0, 9.0),
            (4.0, 9.0),
            (4.0, -3.0),
            (-4.0, -3.0),
            (-4.0, 9.0),
            (-10.0, 9.0),
        ]),
        "star5" => (0..10)
            .map(|k| {
                let r = if k % 2 == 0 { 12.0 } else { 5.5 };
                let a = PI / 2.0 + PI * k as f64 / 5.0;
                Vec2::new(r * a.cos(), r * a.sin())
            })
            .collect(),
        "rounded-square" => {
            let (h, rc) = (10.0, 4.0);
            let mut v = Vec::new();
            for (k, (cx, cy)) in [
                (h - rc, -h + rc),
                (h - rc, h - rc),
                (-h + rc, h - rc),
                (-h + rc, -h + rc),
            ]
            .into_iter()
            .enumerate()
            {
                let start = -PI / 2.0 + k as f64 * PI / 2.0;
                for s in 0..=8 {
                    let a = start + PI / 2.0 * s as f64 / 8.0;
                    v.push(Vec2::new(cx + rc * a.cos(), cy + rc * a.sin()));
                }
            }
            v
        }
        "semicircle" => (0..=16)
            .map(|k| {
                let a = PI * k as f64 / 16.0;
                Vec2::new(12.0 * a.cos(), 12.0 * a.sin())
            })
            .collect(),
        "trapezoid" => pts(&[(-11.0, -8.0), (11.0, -8.0), (6.0, 8.0), (-6.0, 8.0)]),
        "h-shape" => pts(&[
            (-10.0, -10.0),
            (-4.0, -10.0),
            (-4.0, -3.0),
            (4.0, -3.0),
            (4.0, -10.0),
            (10.0, -10.0),
            (10.0, 10.0),
            (4.0, 10.0),
            (4.0, 3.0),
            (-4.0, 3.0),
            (-4.0, 10.0),
            (-10.0, 10.0),
        ]),
        "notched-square" => pts(&[
            (-10.0, -10.0),
            (10.0, -10.0),
            (10.0, 10.0),
            (3.0, 10.0),
            (3.0, 5.0),
            (-3.0, 5.0),
            (-3.0, 10.0),
            (-10.0, 10.0),
        ]),
        _ => return None,
    };
    Some(p)
}

pub fn family_of(id: &str) -> Option<Family> {
    if SEEN_IDS.contains(&id) {
        Some(Family::Seen)
    } else if UNSEEN_IDS.contains(&id) {
        Some(Family::Unseen)
    } else {
        None
    }
}

pub fn shape_by_id(id: &str, clearance: f64) -> Result<ShapeSpec> {
    let family = family_of(id).ok_or_else(|| SfnError::Config(format!("unknown shape `{id}`")))?;
    let outline = peg_outline(id).expect("library ids have outlines");
    ShapeSpec::new(id, family, outline, clearance)
}

pub fn seen_shapes(clearance: f64) -> Result<Vec<ShapeSpec>> {
    SEEN_IDS
        .iter()
        .map(|id| shape_by_id(id, clearance))
        .collect()
}

pub fn unseen_shapes(clearance: f64) -> Result<Vec<ShapeSpec>> {
    UNSEEN_IDS
        .iter()
        .map(|id| shape_by_id(id, clearance))
        .collect()
}

pub fn all_shapes(clearance: f64) -> Result<Vec<ShapeSpec>> {
    let mut v = seen_shapes(clearance)?;
    v.extend(unseen_shapes(clearance)?);
    Ok(v)
}

/// Resolves a comma-separated list where `seen`, `unseen` and `all` expand to
/// the respective families.
pub fn resolve_ids(list: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok {
            "seen" => out.extend(SEEN_IDS.iter().map(|s| s.to_string())),
            "unseen" => out.extend(UNSEEN_IDS.iter().map(|s| s.to_string())),
            "all" => {
                out.extend(SEEN_IDS.iter().map(|s| s.to_string()));
                out.extend(UNSEEN_IDS.iter().map(|s| s.to_string()));
            }
            id if family_of(id).is_some() => out.push(id.to_string()),
            other => return Err(SfnError::Config(format!("unknown shape `{other}`"))),
        }
    }
    if out.is_empty() {
        return Err(SfnError::Config("empty shape list".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub format_version: u32,
    pub shapes: Vec<ShapeSpec>,
}

impl ShapeManifest {
    pub fn new(shapes: Vec<ShapeSpec>) -> Self {
        Self {
            format_version: SHAPE_MANIFEST_VERSION,
            shapes,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != SHAPE_MANIFEST_VERSION {
            return Err(SfnError::Config(format!(
                "shape manifest version {} unsupported",
                m.format_version
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{centroid, signed_area};
    use std::f64::consts::PI;

    #[test]
    fn library_is_well_formed() {
        for c in [0.1, 0.5, 1.0] {
            for s in all_shapes(c).unwrap() {
                assert!(signed_area(&s.peg_polygon) > 0.0, "{}", s.id);
                let g = centroid(&s.peg_polygon);
                assert!(g.norm() < 1e-9, "{} centroid {:?}", s.id, g);
                assert!(s.peg_inside_hole(), "{}", s.id);
                let sag = c * (1.0 - (PI / ARC_SEGMENTS as f64).cos());
                assert!((s.min_vertex_gap() - c).abs() <= sag + 1e-9, "{} gap", s.id);
            }
        }
    }

    #[test]
    fn families_are_disjoint() {
        assert_eq!(seen_shapes(1.0).unwrap().len(), 4);
        assert_eq!(unseen_shapes(1.0).unwrap().len(), 10);
        for id in SEEN_IDS {
            assert!(!UNSEEN_IDS.contains(&id));
        }
    }

    #[test]
    fn rejects_bad_clearance_and_ids() {
        assert!(shape_by_id("square", 0.0).is_err());
        assert!(shape_by_id("blob", 1.0).is_err());
        assert!(resolve_ids("seen,nope").is_err());
        assert_eq!(resolve_ids("seen,cross").unwrap().len(), 5);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shapes.json");
        let m = ShapeManifest::new(all_shapes(0.5).unwrap());
        m.save(&path).unwrap();
        assert_eq!(ShapeManifest::load(&path).unwrap(), m);
    }
}
