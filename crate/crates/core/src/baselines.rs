//! Comparison controllers: Archimedean spiral search and end-to-end vision RL.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfn_nn::{Checkpoint, Conv2d, ConvCfg, Graph, Linear, ParamStore, Tensor};

use crate::datagen::BANK_SIZE;
use crate::error::{Result, SfnError};
use crate::perception::GRID_N;
use crate::policy::{
    train_a2c, AcOutput, ActionSpec, Controller, EpisodeRecord, LearningCurve, PolicyNet,
    RewardConfig, RlConfig, StepRecord,
};
use crate::render::{CameraModel, SegmentedImage, PEG, SEAM};
use crate::shapes::ShapeSpec;
use crate::sim::{check_success, Env, Pose};

pub const E2E_KIND: &str = "e2e-vision";
pub const E2E_VISION_NAME: &str = "e2e-vision";
pub const SPIRAL_NAME: &str = "spiral";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiralConfig {
    /// Radial growth per revolution, mm.
    pub pitch: f64,
    /// Angle advanced per tick, degrees.
    pub angular_step: f64,
    /// Longest arc travelled in one tick, mm; shrinks the angular step at
    /// large radii.
    pub max_arc: f64,
    pub max_radius: f64,
    pub press_force: f64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            pitch: 1.0,
            angular_step: 10.0,
            max_arc: 0.25,
            max_radius: 12.0,
            press_force: 5.0,
        }
    }
}

impl SpiralConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pitch > 0.0
            && self.angular_step > 0.0
            && self.max_arc > 0.0
            && self.max_radius > 0.0)
        {
            return Err(SfnError::Config(
                "spiral parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spiral angle (radians) after `tick + 1` ticks given angle `phi`.
    pub fn advance(&self, phi: f64) -> f64 {
        let r = self.pitch * phi / std::f64::consts::TAU;
        let by_angle = self.angular_step.to_radians();
        let by_arc = if r > 0.0 { self.max_arc / r } else { by_angle };
        phi + by_angle.min(by_arc)
    }

    pub fn radius(&self, phi: f64) -> f64 {
        self.pitch * phi / std::f64::consts::TAU
    }
}

/// Offset of the spiral from its start point at angle `phi`.
pub fn spiral_offset(cfg: &SpiralConfig, phi: f64) -> (f64, f64) {
    let r = cfg.radius(phi);
    (r * phi.cos(), r * phi.sin())
}

/// Spiral search from the env's current pose. Each tick moves to the next
/// spiral point at fixed orientation and tests containment; tick 0 is the
/// start pose. The record holds one step per movement, so its length is
/// the tick at which the search ended.
pub fn spiral_search(env: &Env, cfg: &SpiralConfig) -> Result<EpisodeRecord> {
    cfg.validate()?;
    let shape = env.shape();
    let start = env.pose();
    let camera = *env.camera();
    let noop = ActionSpec::noop(GRID_N, &camera);
    let mut steps = Vec::new();
    let mut phi = 0.0f64;
    let mut pose = start;
    let mut success = check_success(shape, &pose);
    while !success {
        let next = cfg.advance(phi);
        if cfg.radius(next) > cfg.max_radius {
            break;
        }
        let (ox, oy) = spiral_offset(cfg, next);
        let moved = Pose::planar(start.x + ox, start.y + oy, start.theta);
        let mut action = noop;
        action.dx = moved.x - pose.x;
        action.dy = moved.y - pose.y;
        action.dtheta = 0.0;
        pose = Pose {
            z: start.z,
            ..moved
        };
        phi = next;
        success = check_success(shape, &pose);
        steps.push(StepRecord {
            step: steps.len() + 1,
            pose,
            action,
            reward: 0.0,
            loss_pos: 0.0,
            loss_ori: 0.0,
            success,
            occluded: false,
            contact_force: cfg.press_force,
        });
    }
    Ok(EpisodeRecord {
        policy: SPIRAL_NAME.into(),
        shape_id: shape.id.clone(),
        clearance: shape.clearance,
        seed: env.config().seed,
        initial_pose: start,
        steps,
        success,
        final_pose: pose,
    })
}

/// Input planes of the vision baseline: peg and seam masks, 2×2
/// average-pooled, concatenated.
pub fn vision_state(obs: &SegmentedImage) -> Vec<f32> {
    let (h, w) = (obs.height / 2, obs.width / 2);
    let mut out = vec![0.0f32; 2 * h * w];
    for (ch, label) in [PEG, SEAM].into_iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let mut n = 0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    n += (obs.labels[(2 * r + dr) * obs.width + 2 * c + dc] == label) as u32;
                }
                out[ch * h * w + r * w + c] = n as f32 / 4.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct E2eArch {
    pub width: usize,
    pub height: usize,
    pub channels: [usize; 3],
    pub hidden: usize,
    pub grid_n: usize,
    pub camera: CameraModel,
}

impl Default for E2eArch {
    fn default() -> Self {
        let camera = CameraModel::default();
        Self {
            width: camera.image_width / 2,
            height: camera.image_height / 2,
            channels: [8, 16, 16],
            hidden: 64,
            grid_n: GRID_N,
            camera,
        }
    }
}

/// Strided conv trunk on the pooled masks with the same discrete heads as
/// the heatmap controllers.
#[derive(Clone, Debug)]
pub struct E2eVision {
    pub arch: E2eArch,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    fc: Linear,
    hx: Linear,
    hy: Linear,
    ht: Linear,
    value: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct E2eMeta {
    pub arch: E2eArch,
    pub episodes: usize,
}

fn strided_len(n: usize) -> usize {
    (n + 1) / 2
}

impl E2eVision {
    pub fn new(arch: E2eArch, seed: u64) -> Result<Self> {
        if arch.width == 0 || arch.height == 0 || arch.channels.contains(&0) {
            return Err(SfnError::Config(
                "vision baseline sizes must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = ConvCfg {
            stride: 2,
            pad: 1,
            dilation: 1,
        };
        let mut c_in = 2;
        let mut convs = Vec::new();
        let (mut h, mut w) = (arch.height, arch.width);
        for (k, &c) in arch.channels.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("e2e.c{k}"),
                c_in,
                c,
                3,
                cfg,
                1.0,
            ));
            c_in = c;
            h = strided_len(h);
            w = strided_len(w);
        }
        let flat = c_in * h * w;
        let fc = Linear::new(&mut store, &mut rng, "e2e.fc", flat, arch.hidden, 1.0);
        let hx = Linear::new(
            &mut store,
            &mut rng,
            "e2e.hx",
            arch.hidden,
            arch.grid_n,
            0.1,
        );
        let hy = Linear::new(
            &mut store,
            &mut rng,
            "e2e.hy",
            arch.hidden,
            arch.grid_n,
            0.1,
        );
        let ht = Linear::new(&mut store, &mut rng, "e2e.ht", arch.hidden, BANK_SIZE, 0.1);
        let value = Linear::new(&mut store, &mut rng, "e2e.value", arch.hidden, 1, 1.0);
        Ok(Self {
            arch,
            store,
            convs,
            fc,
            hx,
            hy,
            ht,
            value,
        })
    }

    pub fn save(&self, path: &Path, episodes: usize) -> Result<()> {
        let meta = E2eMeta {
            arch: self.arch.clone(),
            episodes,
        };
        Checkpoint::new(E2E_KIND, meta, self.store.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint<E2eMeta> = Checkpoint::load(path, E2E_KIND)?;
        let mut m = Self::new(ck.meta.arch, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

impl PolicyNet for E2eVision {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn history(&self) -> usize {
        1
    }

    fn grid_n(&self) -> usize {
        self.arch.grid_n
    }

    fn camera(&self) -> &CameraModel {
        &self.arch.camera
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[Vec<Vec<f32>>],
    ) -> Result<AcOutput> {
        let (h, w) = (self.arch.height, self.arch.width);
        let nb = windows.len();
        let mut data = Vec::with_capacity(nb * 2 * h * w);
        for win in windows {
            let frame = win
                .last()
                .ok_or_else(|| SfnError::Input("empty state window".into()))?;
            if frame.len() != 2 * h * w {
                return Err(SfnError::Input(format!(
                    "vision state length {} != {}",
                    frame.len(),
                    2 * h * w
                )));
            }
            data.extend_from_slice(frame);
        }
        let mut x = g.constant(Tensor::new(&[nb, 2, h, w], data));
        for conv in &self.convs {
            x = conv.forward(g, store, x);
            x = g.relu(x);
        }
        let flat = g.value(x).numel() / nb;
        let x = g.reshape(x, &[nb, flat]);
        let hid = self.fc.forward(g, store, x);
        let hid = g.relu(hid);
        let lx = self.hx.forward(g, store, hid);
        let ly = self.hy.forward(g, store, hid);
        let lt = self.ht.forward(g, store, hid);
        let v = self.value.forward(g, store, hid);
        Ok(AcOutput {
            logp_x: g.log_softmax(lx),
            logp_y: g.log_softmax(ly),
            logp_t: g.log_softmax(lt),
            value: g.reshape(v, &[nb]),
        })
    }
}

/// A2C on the vision baseline with zero loss penalties in the reward.
pub fn e2e_vision_rl(shapes: &[ShapeSpec], cfg: &RlConfig) -> Result<(E2eVision, LearningCurve)> {
    let model = E2eVision::new(E2eArch::default(), cfg.seed)?;
    let cfg = RlConfig {
        reward: RewardConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg.reward
        },
        ..cfg.clone()
    };
    train_a2c(model, Controller::Vision, shapes, None, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::shape_by_id;
    use crate::sim::EnvConfig;

    fn env_at(id: &str, clearance: f64, pose: Pose) -> Env {
        let mut env = Env::new(EnvConfig::new(shape_by_id(id, clearance).unwrap())).unwrap();
        env.reset_to(pose).unwrap();
        env
    }

    #[test]
    fn aligned_start_succeeds_at_tick_zero() {
        let env = env_at("square", 0.5, Pose::planar(0.0, 0.0, 0.0));
        let rec = spiral_search(&env, &SpiralConfig::default()).unwrap();
        assert!(rec.success);
        assert_eq!(rec.len(), 0);
    }

    #[test]
    fn uncorrected_rotation_fails() {
        let env = env_at("square", 0.5, Pose::planar(3.0, 0.0, 10.0));
        let rec = spiral_search(&env, &SpiralConfig::default()).unwrap();
        assert!(!rec.success);
        assert!(rec
            .steps
            .iter()
            .all(|s| (s.pose.theta - 10.0).abs() < 1e-12));
    }

    #[test]
    fn tick_arc_is_bounded() {
        let cfg = SpiralConfig::default();
        let mut phi = 0.0;
        let mut prev = spiral_offset(&cfg, phi);
        while cfg.radius(phi) < cfg.max_radius {
            phi = cfg.advance(phi);
            let p = spiral_offset(&cfg, phi);
            let step = ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
            assert!(step <= cfg.max_arc * 1.01 + cfg.pitch * cfg.angular_step / 360.0);
            prev = p;
        }
    }

    #[test]
    fn vision_state_pools_masks() {
        let mut img = SegmentedImage::new(4, 2);
        img.labels = vec![1, 1, 2, 0, 1, 0, 2, 2];
        let s = vision_state(&img);
        assert_eq!(s, vec![0.75, 0.0, 0.0, 0.75]);
    }
}
