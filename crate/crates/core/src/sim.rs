//! Planar peg-in-hole environment with a spring contact model in z.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfnError};
use crate::geometry::{point_in_polygon, transform, Polygon, Vec2};
use crate::render::{fill_polygon, render_seg, CameraModel, SegmentedImage, BACKGROUND};
use crate::shapes::{shape_by_id, ShapeSpec};

/// Boundary samples per peg edge used by [`check_success`].
pub const EDGE_SAMPLES: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub z: f64,
}

impl Pose {
    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta,
            z: 0.0,
        }
    }
}

/// Wraps an angle into (−180, 180].
pub fn normalize_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn clipped(&self, bound_mm: f64, bound_deg: f64) -> Self {
        Self {
            dx: self.dx.clamp(-bound_mm, bound_mm),
            dy: self.dy.clamp(-bound_mm, bound_mm),
            dtheta: self.dtheta.clamp(-bound_deg, bound_deg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub shape: ShapeSpec,
    pub init_pos_range: f64,
    pub init_ori_range: f64,
    pub k_max: usize,
    pub px_per_mm: f64,
    pub force_target: f64,
    pub spring_k: f64,
    pub seed: u64,
    pub action_bound_mm: f64,
    pub action_bound_deg: f64,
    pub kp: f64,
    pub ki: f64,
    /// Force-loop iterations run after every planar move.
    pub pi_ticks: usize,
    /// Planar positions are clamped to `±workspace_mm` so the peg stays in view.
    pub workspace_mm: f64,
}

impl EnvConfig {
    pub fn new(shape: ShapeSpec) -> Self {
        Self {
            shape,
            init_pos_range: 10.0,
            init_ori_range: 10.0,
            k_max: 20,
            px_per_mm: 2.0,
            force_target: 5.0,
            spring_k: 10.0,
            seed: 0,
            action_bound_mm: 5.0,
            action_bound_deg: 5.0,
            kp: 0.02,
            ki: 0.005,
            pi_ticks: 10,
            workspace_mm: 25.0,
        }
    }

    pub fn camera(&self) -> CameraModel {
        CameraModel::with_scale(self.px_per_mm)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("init_pos_range", self.init_pos_range),
            ("init_ori_range", self.init_ori_range),
            ("px_per_mm", self.px_per_mm),
            ("force_target", self.force_target),
            ("spring_k", self.spring_k),
            ("action_bound_mm", self.action_bound_mm),
            ("action_bound_deg", self.action_bound_deg),
            ("kp", self.kp),
            ("ki", self.ki),
            ("workspace_mm", self.workspace_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SfnError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.k_max < 1 {
            return Err(SfnError::Config("k_max must be at least 1".into()));
        }
        if self.init_pos_range > self.workspace_mm {
            return Err(SfnError::Config("init_pos_range exceeds workspace".into()));
        }
        Ok(())
    }

    /// Parses the plain-text form, where the shape is given by library id
    /// and clearance.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: EnvConfigFile = toml::from_str(text)?;
        let mut cfg = EnvConfig::new(shape_by_id(&f.shape, f.clearance)?);
        cfg.init_pos_range = f.init_pos_range;
        cfg.init_ori_range = f.init_ori_range;
        cfg.k_max = f.k_max;
        cfg.px_per_mm = f.px_per_mm;
        cfg.force_target = f.force_target;
        cfg.spring_k = f.spring_k;
        cfg.seed = f.seed;
        cfg.action_bound_mm = f.action_bound_mm;
        cfg.action_bound_deg = f.action_bound_deg;
        cfg.kp = f.kp;
        cfg.ki = f.ki;
        cfg.pi_ticks = f.pi_ticks;
        cfg.workspace_mm = f.workspace_mm;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let f = EnvConfigFile {
            shape: self.shape.id.clone(),
            clearance: self.shape.clearance,
            init_pos_range: self.init_pos_range,
            init_ori_range: self.init_ori_range,
            k_max: self.k_max,
            px_per_mm: self.px_per_mm,
            force_target: self.force_target,
            spring_k: self.spring_k,
            seed: self.seed,
            action_bound_mm: self.action_bound_mm,
            action_bound_deg: self.action_bound_deg,
            kp: self.kp,
            ki: self.ki,
            pi_ticks: self.pi_ticks,
            workspace_mm: self.workspace_mm,
        };
        Ok(toml::to_string(&f)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnvConfigFile {
    shape: String,
    clearance: f64,
    init_pos_range: f64,
    init_ori_range: f64,
    k_max: usize,
    px_per_mm: f64,
    force_target: f64,
    spring_k: f64,
    seed: u64,
    action_bound_mm: f64,
    action_bound_deg: f64,
    kp: f64,
    ki: f64,
    pi_ticks: usize,
    workspace_mm: f64,
}

impl Default for EnvConfigFile {
    fn default() -> Self {
        let d = EnvConfig::new(shape_by_id("square", 1.0).expect("library shape"));
        Self {
            shape: d.shape.id,
            clearance: d.shape.clearance,
            init_pos_range: d.init_pos_range,
            init_ori_range: d.init_ori_range,
            k_max: d.k_max,
            px_per_mm: d.px_per_mm,
            force_target: d.force_target,
            spring_k: d.spring_k,
            seed: d.seed,
            action_bound_mm: d.action_bound_mm,
            action_bound_deg: d.action_bound_deg,
            kp: d.kp,
            ki: d.ki,
            pi_ticks: d.pi_ticks,
            workspace_mm: d.workspace_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: SegmentedImage,
    pub success: bool,
    pub terminated: bool,
    pub contact_force: f64,
    pub step_index: usize,
}

/// Transformed peg boundary: vertices plus `EDGE_SAMPLES` interior points per edge.
fn boundary_samples(peg: &[Vec2]) -> Vec<Vec2> {
    let n = peg.len();
    let mut out = Vec::with_capacity(n * (EDGE_SAMPLES + 1));
    for i in 0..n {
        let (a, b) = (peg[i], peg[(i + 1) % n]);
        out.push(a);
        for k in 1..=EDGE_SAMPLES {
            let t = k as f64 / (EDGE_SAMPLES + 1) as f64;
            out.push(a.add(b.sub(a).scale(t)));
        }
    }
    out
}

fn proper_crossing(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Containment of the peg cross-section at `pose` inside the hole opening.
/// Sampled boundary points must lie inside the hole, and no hole edge may
/// cut through the peg outline.
pub fn check_success(shape: &ShapeSpec, pose: &Pose) -> bool {
    let peg: Polygon = transform(&shape.peg_polygon, pose.x, pose.y, pose.theta);
    let hole = &shape.hole_polygon;
    if !boundary_samples(&peg)
        .iter()
        .all(|p| point_in_polygon(*p, hole))
    {
        return false;
    }
    let (n, m) = (peg.len(), hole.len());
    for i in 0..n {
        let (a, b) = (peg[i], peg[(i + 1) % n]);
        for j in 0..m {
            if proper_crossing(a, b, hole[j], hole[(j + 1) % m]) {
                return false;
            }
        }
    }
    true
}

/// One PI update. Returns the z increment (negative presses down) and the
/// new integral state.
pub fn pi_force_step(
    _current_z: f64,
    measured_force: f64,
    target_force: f64,
    gains: (f64, f64),
    integral_state: f64,
) -> (f64, f64) {
    let e = target_force - measured_force;
    let integral = integral_state + e;
    let dz = -(gains.0 * e + gains.1 * integral);
    (dz, integral)
}

pub fn spring_force(spring_k: f64, z_cmd: f64) -> f64 {
    spring_k * (-z_cmd).max(0.0)
}

/// Closed loop of [`pi_force_step`] with the spring plant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceLoop {
    pub z_cmd: f64,
    pub integral: f64,
    pub force: f64,
}

impl ForceLoop {
    pub fn tick(&mut self, target: f64, spring_k: f64, gains: (f64, f64)) {
        let (dz, integral) = pi_force_step(self.z_cmd, self.force, target, gains, self.integral);
        self.integral = integral;
        self.z_cmd += dz;
        self.force = spring_force(spring_k, self.z_cmd);
    }

    pub fn height(&self) -> f64 {
        self.z_cmd.max(0.0)
    }
}

/// Ticks used to settle the force loop at reset.
pub const SETTLE_TICKS: usize = 400;

#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    camera: CameraModel,
    pose: Pose,
    force: ForceLoop,
    step_index: usize,
    terminated: bool,
    occluder: Option<Polygon>,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            camera: cfg.camera(),
            cfg,
            pose: Pose::default(),
            force: ForceLoop::default(),
            step_index: 0,
            terminated: true,
            occluder: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn shape(&self) -> &ShapeSpec {
        &self.cfg.shape
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Samples the initial planar error uniformly and settles the force loop.
    pub fn reset(&mut self, rng_seed: u64) -> Result<(Pose, StepResult)> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (p, o) = (self.cfg.init_pos_range, self.cfg.init_ori_range);
        let x = rng.random_range(-p..=p);
        let y = rng.random_range(-p..=p);
        let theta = rng.random_range(-o..=o);
        self.reset_to(Pose::planar(x, y, theta))
    }

    /// Starts an episode from an explicit planar pose.
    pub fn reset_to(&mut self, pose: Pose) -> Result<(Pose, StepResult)> {
        self.pose = Pose::planar(pose.x, pose.y, normalize_deg(pose.theta));
        self.force = ForceLoop::default();
        let gains = (self.cfg.kp, self.cfg.ki);
        for _ in 0..SETTLE_TICKS {
            self.force
                .tick(self.cfg.force_target, self.cfg.spring_k, gains);
        }
        self.pose.z = self.force.height();
        self.step_index = 0;
        self.terminated = false;
        let res = self.result()?;
        self.terminated = res.terminated;
        Ok((self.pose, res))
    }

    /// Occluder (pixel-space polygon) applied to subsequent observations.
    pub fn set_occluder(&mut self, occluder: Option<Polygon>) {
        self.occluder = occluder;
    }

    pub fn step(&mut self, action: Action) -> Result<(Pose, StepResult)> {
        if self.terminated {
            return Err(SfnError::Protocol(
                "step called on a terminated episode".into(),
            ));
        }
        let a = action.clipped(self.cfg.action_bound_mm, self.cfg.action_bound_deg);
        let w = self.cfg.workspace_mm;
        self.pose.x = (self.pose.x + a.dx).clamp(-w, w);
        self.pose.y = (self.pose.y + a.dy).clamp(-w, w);
        self.pose.theta = normalize_deg(self.pose.theta + a.dtheta);
        let gains = (self.cfg.kp, self.cfg.ki);
        for _ in 0..self.cfg.pi_ticks {
            self.force
                .tick(self.cfg.force_target, self.cfg.spring_k, gains);
        }
        self.pose.z = self.force.height();
        self.step_index += 1;
        let res = self.result()?;
        self.terminated = res.terminated;
        Ok((self.pose, res))
    }

    pub fn observe(&self) -> Result<SegmentedImage> {
        let img = render_seg(&self.cfg.shape, &self.pose, &self.camera)?;
        Ok(match &self.occluder {
            Some(o) => inject_occlusion(&img, &polygon_px(o)),
            None => img,
        })
    }

    fn result(&self) -> Result<StepResult> {
        let success = check_success(&self.cfg.shape, &self.pose);
        Ok(StepResult {
            observation: self.observe()?,
            success,
            terminated: success || self.step_index >= self.cfg.k_max,
            contact_force: self.force.force,
            step_index: self.step_index,
        })
    }
}

fn polygon_px(p: &[Vec2]) -> Vec<(f64, f64)> {
    p.iter().map(|v| (v.x, v.y)).collect()
}

/// Sets every pixel whose centre lies under `occluder` (pixel coordinates
/// `(col, row)`) to background.
pub fn inject_occlusion(image: &SegmentedImage, occluder: &[(f64, f64)]) -> SegmentedImage {
    let mut out = image.clone();
    let w = out.width;
    fill_polygon(occluder, out.width, out.height, |r, c| {
        out.labels[r * w + c] = BACKGROUND;
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::SEAM;

    fn env(shape: &str, clearance: f64) -> Env {
        Env::new(EnvConfig::new(shape_by_id(shape, clearance).unwrap())).unwrap()
    }

    #[test]
    fn normalize_wraps_into_half_open_range() {
        assert_eq!(normalize_deg(180.0), 180.0);
        assert_eq!(normalize_deg(-180.0), 180.0);
        assert_eq!(normalize_deg(190.0), -170.0);
        assert_eq!(normalize_deg(-540.0), 180.0);
    }

    #[test]
    fn success_examples() {
        let sq = shape_by_id("square", 0.5).unwrap();
        assert!(check_success(&sq, &Pose::default()));
        assert!(!check_success(&sq, &Pose::planar(0.6, 0.0, 0.0)));
        assert!(check_success(&sq, &Pose::planar(0.3, 0.0, 0.0)));
    }

    #[test]
    fn exact_cancellation_succeeds() {
        let mut e = env("square", 0.5);
        e.reset_to(Pose::planar(3.0, -2.0, 4.0)).unwrap();
        let (p, r) = e.step(Action::new(-3.0, 2.0, -4.0)).unwrap();
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.theta.abs() < 1e-12);
        assert!(r.success && r.terminated);
    }

    #[test]
    fn actions_are_clipped() {
        let mut e = env("square", 0.5);
        e.reset_to(Pose::planar(-8.0, 0.0, 0.0)).unwrap();
        let (p, _) = e.step(Action::new(100.0, 0.0, 0.0)).unwrap();
        assert!((p.x - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn episode_terminates_at_k_max() {
        let mut cfg = EnvConfig::new(shape_by_id("square", 0.5).unwrap());
        cfg.k_max = 20;
        let mut e = Env::new(cfg).unwrap();
        e.reset_to(Pose::planar(8.0, 8.0, 0.0)).unwrap();
        let mut last = None;
        for _ in 0..20 {
            last = Some(e.step(Action::default()).unwrap().1);
        }
        let r = last.unwrap();
        assert!(r.terminated && !r.success && r.step_index == 20);
        assert!(matches!(
            e.step(Action::default()),
            Err(SfnError::Protocol(_))
        ));
    }

    #[test]
    fn reset_is_deterministic_and_in_range() {
        let mut cfg = EnvConfig::new(shape_by_id("hexagon", 1.0).unwrap());
        cfg.init_pos_range = 5.0;
        cfg.init_ori_range = 6.0;
        let mut a = Env::new(cfg.clone()).unwrap();
        let mut b = Env::new(cfg).unwrap();
        let (pa, ra) = a.reset(7).unwrap();
        let (pb, rb) = b.reset(7).unwrap();
        assert_eq!(pa.x.to_bits(), pb.x.to_bits());
        assert_eq!(pa.theta.to_bits(), pb.theta.to_bits());
        assert_eq!(ra, rb);
        assert!(pa.x.abs() <= 5.0 && pa.theta.abs() <= 6.0);
    }

    #[test]
    fn zero_range_is_config_error() {
        let mut cfg = EnvConfig::new(shape_by_id("square", 1.0).unwrap());
        cfg.init_pos_range = 0.0;
        assert!(matches!(Env::new(cfg), Err(SfnError::Config(_))));
    }

    #[test]
    fn force_loop_settles_at_target() {
        let mut e = env("square", 1.0);
        let (p, r) = e.reset_to(Pose::planar(4.0, 0.0, 0.0)).unwrap();
        assert!((r.contact_force - 5.0).abs() < 1e-6);
        assert_eq!(p.z, 0.0);
        let (_, r) = e.step(Action::default()).unwrap();
        assert!((r.contact_force - 5.0).abs() < 1e-6);
    }

    #[test]
    fn pi_zero_error_has_no_proportional_term() {
        let (dz, i) = pi_force_step(0.0, 5.0, 5.0, (0.02, 0.0), 0.0);
        assert_eq!((dz, i), (0.0, 0.0));
    }

    #[test]
    fn occlusion_identity_and_total() {
        let e = env("square", 1.0);
        let img =
            crate::render::render_seg(e.shape(), &Pose::planar(3.0, 0.0, 0.0), e.camera()).unwrap();
        assert_eq!(inject_occlusion(&img, &[]), img);
        let full = [(0.0, 0.0), (250.0, 0.0), (250.0, 200.0), (0.0, 200.0)];
        let blank = inject_occlusion(&img, &full);
        assert_eq!(blank.count(BACKGROUND), 250 * 200);
        assert!(img.count(SEAM) > 0);
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = EnvConfig::new(shape_by_id("cross", 0.6).unwrap());
        cfg.k_max = 7;
        cfg.seed = 3;
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("shape = \"cross\""));
        assert_eq!(EnvConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
