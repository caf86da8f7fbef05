//! Controllers (SFSS, SFMS, MFMS), the reward, A2C and the episode runner.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfn_nn::{Adam, Checkpoint, Gradients, Graph, Linear, Lstm, ParamId, ParamStore, Tensor, Var};

use crate::datagen::{derive_seed, BANK_CENTER, BANK_SIZE, BANK_STEP_DEG};
use crate::error::{Result, SfnError};
use crate::geometry::Vec2;
use crate::perception::{
    contrastive_loss_batched, heatmap_bce, orientation_target, position_target_for_pose, OriModel,
    OrientationHeatmap, PosModel, PositionHeatmap,
};
use crate::render::{CameraModel, SegmentedImage};
use crate::shapes::ShapeSpec;
use crate::sim::{Action, Env, EnvConfig, Pose};

pub const AC_KIND: &str = "actor-critic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sfss,
    Sfms,
    Mfms,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sfss => "sfss",
            Variant::Sfms => "sfms",
            Variant::Mfms => "mfms",
        })
    }
}

impl FromStr for Variant {
    type Err = SfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfss" => Ok(Variant::Sfss),
            "sfms" => Ok(Variant::Sfms),
            "mfms" => Ok(Variant::Mfms),
            _ => Err(SfnError::Config(format!("unknown policy variant `{s}`"))),
        }
    }
}

/// Discrete action: cells of the position grid and the orientation bank,
/// decoded to the negated error they encode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub ix: usize,
    pub iy: usize,
    pub ik: usize,
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl ActionSpec {
    pub fn from_indices(ix: usize, iy: usize, ik: usize, n: usize, camera: &CameraModel) -> Self {
        let h = (n / 2) as f64;
        Self {
            ix,
            iy,
            ik,
            dx: -(ix as f64 - h) / camera.px_per_mm,
            dy: -(iy as f64 - h) / camera.px_per_mm,
            dtheta: -(ik as f64 - BANK_CENTER as f64) * BANK_STEP_DEG,
        }
    }

    pub fn noop(n: usize, camera: &CameraModel) -> Self {
        Self::from_indices(n / 2, n / 2, BANK_CENTER, n, camera)
    }

    pub fn to_action(&self) -> Action {
        Action::new(self.dx, self.dy, self.dtheta)
    }
}

/// One-step argmax controller.
pub fn sfss_action(
    phi: &PositionHeatmap,
    d: &OrientationHeatmap,
    camera: &CameraModel,
) -> ActionSpec {
    let (i, j) = phi.argmax();
    ActionSpec::from_indices(i, j, d.argmax(), phi.n, camera)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k_max: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.01,
            k_max: 20,
        }
    }
}

pub fn reward(success: bool, loss_pos: f64, loss_ori: f64, cfg: &RewardConfig) -> f64 {
    let penalty = cfg.alpha * loss_pos + cfg.beta * loss_ori;
    if success {
        1.0 - penalty
    } else {
        -1.0 / cfg.k_max as f64 - penalty
    }
}

/// Perception losses of a frame against the true pose error; the position
/// loss is divided by `n²`.
pub fn frame_losses(
    phi: &PositionHeatmap,
    d: &OrientationHeatmap,
    pose: &Pose,
    camera: &CameraModel,
) -> (f64, f64) {
    let target = position_target_for_pose(pose, camera, phi.n);
    let lp = heatmap_bce(phi, &target) / (phi.n * phi.n) as f64;
    let dv: Vec<f64> = d.values.iter().map(|&v| v as f64).collect();
    let lo = contrastive_loss_batched(&dv, orientation_target(pose));
    (lp, lo)
}

/// `[Φ, D]` flattened: `n² + 11` values.
pub fn policy_state(phi: &PositionHeatmap, d: &OrientationHeatmap) -> Vec<f32> {
    let mut s = phi.values.clone();
    s.extend_from_slice(&d.values);
    s
}

/// Frozen perception networks producing both heatmaps.
#[derive(Clone, Debug)]
pub struct Perception {
    pub pos: PosModel,
    pub ori: OriModel,
}

impl Perception {
    pub fn camera(&self) -> &CameraModel {
        &self.pos.arch().camera
    }

    /// Heatmaps of a segmented frame. A frame without visible peg yields an
    /// orientation heatmap that mildly prefers no rotation.
    pub fn heatmaps(&self, obs: &SegmentedImage) -> Result<(PositionHeatmap, OrientationHeatmap)> {
        let phi = self.pos.predict(obs)?;
        let d = if obs.count(crate::render::PEG) == 0 {
            OrientationHeatmap {
                values: (0..BANK_SIZE)
                    .map(|i| (-(i.abs_diff(BANK_CENTER) as f64) * 1e-3).exp() as f32)
                    .collect(),
            }
        } else {
            self.ori.predict(obs)?
        };
        Ok((phi, d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcArch {
    pub variant: Variant,
    pub grid_n: usize,
    pub hidden: usize,
    pub history: usize,
    pub kernel: usize,
    pub camera: CameraModel,
}

impl AcArch {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            grid_n: crate::perception::GRID_N,
            hidden: 64,
            history: if variant == Variant::Mfms { 4 } else { 1 },
            kernel: 5,
            camera: CameraModel::default(),
        }
    }

    pub fn state_len(&self) -> usize {
        self.grid_n * self.grid_n + BANK_SIZE
    }

    fn pooled_len(&self) -> usize {
        2 * self.grid_n + BANK_SIZE
    }
}

/// Actor-critic over heatmap states. Each frame is pooled to standardised
/// x/y marginals of `Φ` and standardised `D`; SFMS feeds the pooled frame to
/// the trunk, MFMS first runs an LSTM over the last `history` frames. Every
/// action head adds a learned 1-D correlation of the current frame's
/// matching marginal to the trunk logits.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub arch: AcArch,
    pub store: ParamStore,
    lstm: Option<Lstm>,
    t1: Linear,
    t2: Linear,
    hx: Linear,
    hy: Linear,
    ht: Linear,
    value: Linear,
    kxy: ParamId,
    kt: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcMeta {
    pub arch: AcArch,
    pub episodes: usize,
}

fn standardize(v: &[f32]) -> Vec<f32> {
    let n = v.len() as f32;
    let mean = v.iter().sum::<f32>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let sd = var.sqrt() + 1e-4;
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Parameter-free pooling of a `[Φ, D]` state to `2n + 11` values.
pub fn pool_state(state: &[f32], n: usize) -> Vec<f32> {
    let mut mx = vec![0.0f32; n];
    let mut my = vec![0.0f32; n];
    for i in 0..n {
        for j in 0..n {
            let v = state[i * n + j];
            mx[i] += v;
            my[j] += v;
        }
    }
    let mut out = standardize(&mx);
    out.extend(standardize(&my));
    out.extend(standardize(&state[n * n..]));
    out
}

/// Correlation of each row of `z: [N, L]` with a centred kernel `w: [K]`,
/// zero-padded: `out[b, i] = Σ_k w[k]·z[b, i + k − K/2]`.
fn corr1d(g: &mut Graph, z: Var, w: Var) -> Var {
    let zv = g.value(z).clone();
    let wv = g.value(w).data().to_vec();
    let (nb, l) = (zv.dim(0), zv.dim(1));
    let k = wv.len();
    let r = (k / 2) as isize;
    let at = move |i: usize, kk: usize| -> Option<usize> {
        let s = i as isize + kk as isize - r;
        (s >= 0 && (s as usize) < l).then_some(s as usize)
    };
    let mut out = vec![0.0f32; nb * l];
    for b in 0..nb {
        for i in 0..l {
            let mut acc = 0.0;
            for (kk, wk) in wv.iter().enumerate() {
                if let Some(s) = at(i, kk) {
                    acc += wk * zv.data()[b * l + s];
                }
            }
            out[b * l + i] = acc;
        }
    }
    g.op(&[z, w], Tensor::new(&[nb, l], out), move |gr, _, _| {
        let mut gz = vec![0.0f32; nb * l];
        let mut gw = vec![0.0f32; k];
        for b in 0..nb {
            for i in 0..l {
                let go = gr.data()[b * l + i];
                for kk in 0..k {
                    if let Some(s) = at(i, kk) {
                        gz[b * l + s] += wv[kk] * go;
                        gw[kk] += zv.data()[b * l + s] * go;
                    }
                }
            }
        }
        vec![Tensor::new(&[nb, l], gz), Tensor::new(&[k], gw)]
    })
}

/// Head outputs for a batch of windows.
pub struct AcOutput {
    pub logp_x: Var,
    pub logp_y: Var,
    pub logp_t: Var,
    pub value: Var,
}

impl ActorCritic {
    pub fn new(arch: AcArch, seed: u64) -> Result<Self> {
        if arch.variant == Variant::Sfss {
            return Err(SfnError::Config("SFSS has no learned parameters".into()));
        }
        if arch.history == 0 || arch.kernel % 2 == 0 {
            return Err(SfnError::Config(
                "history must be ≥ 1 and kernel odd".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = arch.pooled_len();
        let hd = arch.hidden;
        let (lstm, trunk_in) = match arch.variant {
            Variant::Mfms => (Some(Lstm::new(&mut store, &mut rng, "ac.lstm", m, hd)), hd),
            _ => (None, m),
        };
        let t1 = Linear::new(&mut store, &mut rng, "ac.t1", trunk_in, hd, 1.0);
        let t2 = Linear::new(&mut store, &mut rng, "ac.t2", hd, hd, 1.0);
        let n = arch.grid_n;
        let hx = Linear::new(&mut store, &mut rng, "ac.hx", hd, n, 0.1);
        let hy = Linear::new(&mut store, &mut rng, "ac.hy", hd, n, 0.1);
        let ht = Linear::new(&mut store, &mut rng, "ac.ht", hd, BANK_SIZE, 0.1);
        let value = Linear::new(&mut store, &mut rng, "ac.value", hd, 1, 1.0);
        let mut centre_tap = |len: usize| {
            let w: Vec<f32> = (0..len)
                .map(|i| {
                    if i == len / 2 {
                        1.0
                    } else {
                        rng.random_range(-0.01..0.01)
                    }
                })
                .collect();
            Tensor::new(&[len], w)
        };
        let kxy = store.add("ac.kxy", centre_tap(arch.kernel));
        let kt = store.add("ac.kt", centre_tap(3));
        Ok(Self {
            arch,
            store,
            lstm,
            t1,
            t2,
            hx,
            hy,
            ht,
            value,
            kxy,
            kt,
        })
    }

    /// Pads a window at the front by repeating its first entry up to
    /// `history` frames and keeps the newest `history`.
    pub fn padded_window(&self, window: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        if window.is_empty() {
            return Err(SfnError::Input("empty state window".into()));
        }
        let h = self.arch.history;
        let tail = &window[window.len().saturating_sub(h)..];
        let mut out: Vec<Vec<f32>> = std::iter::repeat_n(tail[0].clone(), h - tail.len()).collect();
        out.extend(tail.iter().cloned());
        Ok(out)
    }

    /// Trunk input: the pooled frame (SFMS) or the LSTM's final hidden
    /// state over the pooled window (MFMS).
    fn encode(&self, g: &mut Graph, store: &ParamStore, pooled: &[Vec<Vec<f32>>]) -> Var {
        let nb = pooled.len();
        let m = self.arch.pooled_len();
        let frame = |g: &mut Graph, t: usize| {
            let mut data = Vec::with_capacity(nb * m);
            for w in pooled {
                data.extend_from_slice(&w[t]);
            }
            g.constant(Tensor::new(&[nb, m], data))
        };
        match &self.lstm {
            Some(lstm) => {
                let xs: Vec<Var> = (0..self.arch.history).map(|t| frame(g, t)).collect();
                lstm.forward(g, store, &xs)
            }
            None => frame(g, self.arch.history - 1),
        }
    }

    fn pool_windows(&self, windows: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<Vec<f32>>>> {
        windows
            .iter()
            .map(|w| {
                let p = self.padded_window(w)?;
                for s in &p {
                    if s.len() != self.arch.state_len() {
                        return Err(SfnError::Input(format!(
                            "state length {} != {}",
                            s.len(),
                            self.arch.state_len()
                        )));
                    }
                }
                Ok(p.iter().map(|s| pool_state(s, self.arch.grid_n)).collect())
            })
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[Vec<Vec<f32>>],
    ) -> Result<AcOutput> {
        let pooled = self.pool_windows(windows)?;
        let nb = pooled.len();
        let n = self.arch.grid_n;
        let x = self.encode(g, store, &pooled);
        let h = self.t1.forward(g, store, x);
        let h = g.relu(h);
        let h = self.t2.forward(g, store, h);
        let h = g.relu(h);
        let last = self.arch.history - 1;
        let part = |off: usize, len: usize| {
            let mut d = Vec::with_capacity(nb * len);
            for w in &pooled {
                d.extend_from_slice(&w[last][off..off + len]);
            }
            Tensor::new(&[nb, len], d)
        };
        let kxy = g.param(store, self.kxy);
        let kt = g.param(store, self.kt);
        let zx = g.constant(part(0, n));
        let zy = g.constant(part(n, n));
        let zt = g.constant(part(2 * n, BANK_SIZE));
        let mut heads = Vec::with_capacity(3);
        for (lin, z, k) in [(&self.hx, zx, kxy), (&self.hy, zy, kxy), (&self.ht, zt, kt)] {
            let a = lin.forward(g, store, h);
            let s = corr1d(g, z, k);
            let l = g.add(a, s);
            heads.push(g.log_softmax(l));
        }
        let v = self.value.forward(g, store, h);
        let value = g.reshape(v, &[nb]);
        Ok(AcOutput {
            logp_x: heads[0],
            logp_y: heads[1],
            logp_t: heads[2],
            value,
        })
    }

    /// Picks an action for one window: sampled when `rng` is given, greedy
    /// otherwise. Returns the action and the value estimate.
    pub fn act(
        &self,
        window: &[Vec<f32>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ActionSpec, f32)> {
        act_with(self, window, rng)
    }

    pub fn save(&self, path: &Path, episodes: usize) -> Result<()> {
        let meta = AcMeta {
            arch: self.arch.clone(),
            episodes,
        };
        Checkpoint::new(AC_KIND, meta, self.store.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint<AcMeta> = Checkpoint::load(path, AC_KIND)?;
        let mut m = Self::new(ck.meta.arch, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

/// Network interface shared by the learned controllers.
pub trait PolicyNet {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn history(&self) -> usize;
    fn grid_n(&self) -> usize;
    fn camera(&self) -> &CameraModel;
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        windows: &[Vec<Vec<f32>>],
    ) -> Result<AcOutput>;
}

impl PolicyNet for ActorCritic {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn history(&self) -> usize {
        self.arch.history
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
        ActorCritic::forward(self, g, store, windows)
    }
}

pub fn act_with<N: PolicyNet + ?Sized>(
    net: &N,
    window: &[Vec<f32>],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(ActionSpec, f32)> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, net.params(), &[window.to_vec()])?;
    let mut rng = rng;
    let mut pick = |lp: &[f32]| match rng.as_deref_mut() {
        Some(r) => sample_categorical(lp, r.random::<f32>()),
        None => sfn_nn::tensor::argmax(lp),
    };
    let ix = pick(g.value(out.logp_x).data());
    let iy = pick(g.value(out.logp_y).data());
    let ik = pick(g.value(out.logp_t).data());
    let v = g.value(out.value).data()[0];
    Ok((
        ActionSpec::from_indices(ix, iy, ik, net.grid_n(), net.camera()),
        v,
    ))
}

/// Inverse-CDF sample from log-probabilities with `u ∈ [0, 1)`.
pub fn sample_categorical(logp: &[f32], u: f32) -> usize {
    let mut acc = 0.0f32;
    for (i, &l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Final hidden state of the MFMS encoder over a window (front-padded).
pub fn encode_history(model: &ActorCritic, window: &[Vec<f32>]) -> Result<Vec<f32>> {
    let pooled = model.pool_windows(&[window.to_vec()])?;
    let mut g = Graph::new();
    let v = model.encode(&mut g, &model.store, &pooled);
    Ok(g.value(v).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2cHyper {
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f32,
    pub max_grad_norm: f64,
}

impl Default for A2cHyper {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 1e-3,
            max_grad_norm: 5.0,
        }
    }
}

/// One decision of a rollout.
#[derive(Clone, Debug)]
pub struct Transition {
    pub window: Vec<Vec<f32>>,
    pub action: (usize, usize, usize),
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct A2cDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// `G_t = r_t + γ·G_{t+1}` with `G` zero after the last step.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `−mean(A·log π)` with constant advantages.
pub fn policy_gradient_loss(g: &mut Graph, logp: Var, advantages: &[f32]) -> Var {
    let n = advantages.len();
    let a = Tensor::new(&[n], advantages.to_vec());
    let weighted = g.mul_const(logp, &a);
    let m = g.mean(weighted);
    g.scale(m, -1.0)
}

fn entropy_of(g: &mut Graph, logp: Var) -> Var {
    let p = g.exp(logp);
    let pl = g.mul(p, logp);
    let s = g.sum_last(pl);
    g.scale(s, -1.0)
}

/// One synchronous A2C step over complete trajectories.
pub fn a2c_update<N: PolicyNet + ?Sized>(
    model: &mut N,
    opt: &mut Adam,
    trajectories: &[Vec<Transition>],
    hyper: &A2cHyper,
) -> Result<A2cDiagnostics> {
    let steps: usize = trajectories.iter().map(Vec::len).sum();
    if steps == 0 {
        return Err(SfnError::Training("a2c_update on an empty batch".into()));
    }
    let mut windows = Vec::with_capacity(steps);
    let mut returns = Vec::with_capacity(steps);
    let (mut ax, mut ay, mut at) = (Vec::new(), Vec::new(), Vec::new());
    for traj in trajectories {
        let rs: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        returns.extend(discounted_returns(&rs, hyper.gamma));
        for t in traj {
            windows.push(t.window.clone());
            ax.push(t.action.0);
            ay.push(t.action.1);
            at.push(t.action.2);
        }
    }
    let mut g = Graph::new();
    let out = model.forward(&mut g, model.params(), &windows)?;
    let values = g.value(out.value).data().to_vec();
    let adv: Vec<f32> = returns
        .iter()
        .zip(&values)
        .map(|(r, v)| (*r - *v as f64) as f32)
        .collect();
    let lx = g.gather_last(out.logp_x, &ax);
    let ly = g.gather_last(out.logp_y, &ay);
    let lt = g.gather_last(out.logp_t, &at);
    let lxy = g.add(lx, ly);
    let logp = g.add(lxy, lt);
    let pl = policy_gradient_loss(&mut g, logp, &adv);
    let target = g.constant(Tensor::new(
        &[steps],
        returns.iter().map(|&r| r as f32).collect(),
    ));
    let diff = g.sub(out.value, target);
    let sq = g.square(diff);
    let vl = g.mean(sq);
    let ex = entropy_of(&mut g, out.logp_x);
    let ey = entropy_of(&mut g, out.logp_y);
    let et = entropy_of(&mut g, out.logp_t);
    let exy = g.add(ex, ey);
    let ent = g.add(exy, et);
    let ent = g.mean(ent);
    let vterm = g.scale(vl, hyper.value_coef as f32);
    let eterm = g.scale(ent, -(hyper.entropy_coef as f32));
    let total = g.add(pl, vterm);
    let total = g.add(total, eterm);
    let diag_vals = (
        g.value(pl).item() as f64,
        g.value(vl).item() as f64,
        g.value(ent).item() as f64,
        g.value(total).item() as f64,
    );
    let mut grads: Gradients = g.backward(total);
    if !grads.all_finite() {
        return Err(SfnError::Training("non-finite A2C gradient".into()));
    }
    let norm = grads.clip_global_norm(hyper.max_grad_norm);
    opt.step(model.params_mut(), &grads);
    Ok(A2cDiagnostics {
        policy_loss: diag_vals.0,
        value_loss: diag_vals.1,
        entropy: diag_vals.2,
        total: diag_vals.3,
        grad_norm: norm,
    })
}

/// Pixel-space occluder shown for the first `frames` decisions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub frames: usize,
    pub kind: OccluderKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum OccluderKind {
    /// Rectangle from the hole centre outwards over one randomly chosen half.
    HalfHole { extent_px: f64 },
    /// Square centred on the hole.
    FullHole { extent_px: f64 },
    /// Fixed rectangle `(col0, row0, col1, row1)`.
    Rect { c0: f64, r0: f64, c1: f64, r1: f64 },
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            frames: 3,
            kind: OccluderKind::HalfHole { extent_px: 60.0 },
        }
    }
}

impl FromStr for OcclusionSpec {
    type Err = SfnError;

    /// `none`, `default`, `half:<frames>`, `full:<frames>` or
    /// `rect:<frames>:<c0>,<r0>,<c1>,<r1>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SfnError::Config(format!("bad occlusion spec `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let frames = |i: usize| -> Result<usize> {
            parts.get(i).ok_or_else(bad)?.parse().map_err(|_| bad())
        };
        match parts[0] {
            "default" => Ok(Self::default()),
            "half" => Ok(Self {
                frames: frames(1)?,
                kind: OccluderKind::HalfHole { extent_px: 60.0 },
            }),
            "full" => Ok(Self {
                frames: frames(1)?,
                kind: OccluderKind::FullHole { extent_px: 60.0 },
            }),
            "rect" => {
                let v: Vec<f64> = parts
                    .get(2)
                    .ok_or_else(bad)?
                    .split(',')
                    .map(|x| x.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                if v.len() != 4 {
                    return Err(bad());
                }
                Ok(Self {
                    frames: frames(1)?,
                    kind: OccluderKind::Rect {
                        c0: v[0],
                        r0: v[1],
                        c1: v[2],
                        r1: v[3],
                    },
                })
            }
            _ => Err(bad()),
        }
    }
}

fn rect(c0: f64, r0: f64, c1: f64, r1: f64) -> Vec<Vec2> {
    vec![
        Vec2::new(c0, r0),
        Vec2::new(c1, r0),
        Vec2::new(c1, r1),
        Vec2::new(c0, r1),
    ]
}

impl OcclusionSpec {
    /// Occluder polygon in `(col, row)` pixels for an episode.
    pub fn polygon(&self, camera: &CameraModel, episode_seed: u64) -> Vec<Vec2> {
        let (pc, pr) = camera.principal_point;
        match self.kind {
            OccluderKind::HalfHole { extent_px: e } => {
                match derive_seed(episode_seed, &[0x0cc1]) % 4 {
                    0 => rect(pc - e, pr - e, pc, pr + e),
                    1 => rect(pc, pr - e, pc + e, pr + e),
                    2 => rect(pc - e, pr - e, pc + e, pr),
                    _ => rect(pc - e, pr, pc + e, pr + e),
                }
            }
            OccluderKind::FullHole { extent_px: e } => rect(pc - e, pr - e, pc + e, pr + e),
            OccluderKind::Rect { c0, r0, c1, r1 } => rect(c0, r0, c1, r1),
        }
    }
}

/// Controller used by the episode runner.
#[derive(Clone, Debug)]
pub enum Controller {
    Sfss,
    Learned(ActorCritic),
    Vision(crate::baselines::E2eVision),
}

impl Controller {
    pub fn name(&self) -> String {
        match self {
            Controller::Sfss => Variant::Sfss.to_string(),
            Controller::Learned(m) => m.arch.variant.to_string(),
            Controller::Vision(_) => crate::baselines::E2E_VISION_NAME.to_string(),
        }
    }

    fn history(&self) -> usize {
        match self {
            Controller::Sfss | Controller::Vision(_) => 1,
            Controller::Learned(m) => m.arch.history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub pose: Pose,
    pub action: ActionSpec,
    pub reward: f64,
    pub loss_pos: f64,
    pub loss_ori: f64,
    pub success: bool,
    pub occluded: bool,
    pub contact_force: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub policy: String,
    pub shape_id: String,
    pub clearance: f64,
    pub seed: u64,
    pub initial_pose: Pose,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub final_pose: Pose,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// 1-based step at which the episode succeeded.
    pub fn success_step(&self) -> Option<usize> {
        self.success.then_some(self.steps.len())
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Header line followed by one line per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut head = self.clone();
        head.steps.clear();
        let mut out = serde_json::to_string(&head)?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| SfnError::Input("empty episode log".into()))?;
        let mut rec: EpisodeRecord = serde_json::from_str(head)?;
        for l in lines {
            rec.steps.push(serde_json::from_str(l)?);
        }
        Ok(rec)
    }
}

/// Episodes in a multi-episode log, separated by their header lines.
pub fn parse_episode_log(text: &str) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for l in text.lines().filter(|l| !l.trim().is_empty()) {
        if l.contains("\"initial_pose\"") && !cur.is_empty() {
            out.push(EpisodeRecord::from_jsonl(&cur)?);
            cur.clear();
        }
        cur.push_str(l);
        cur.push('\n');
    }
    if !cur.is_empty() {
        out.push(EpisodeRecord::from_jsonl(&cur)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub reward: RewardConfig,
    pub occlusion: Option<OcclusionSpec>,
    /// Sample actions (training) instead of taking the mode.
    pub explore: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            occlusion: None,
            explore: false,
        }
    }
}

/// Rollout output: the record plus the transitions used for learning.
pub struct Rollout {
    pub record: EpisodeRecord,
    pub transitions: Vec<Transition>,
}

/// Runs one episode from `reset(seed)` (or `start`, when given).
pub fn run_episode(
    env: &mut Env,
    controller: &Controller,
    perception: Option<&Perception>,
    seed: u64,
    start: Option<Pose>,
    cfg: &RunConfig,
) -> Result<EpisodeRecord> {
    Ok(rollout(env, controller, perception, seed, start, cfg)?.record)
}

pub fn rollout(
    env: &mut Env,
    controller: &Controller,
    perception: Option<&Perception>,
    seed: u64,
    start: Option<Pose>,
    cfg: &RunConfig,
) -> Result<Rollout> {
    let camera = *env.camera();
    let occluder = cfg
        .occlusion
        .as_ref()
        .map(|o| (o.frames, o.polygon(&camera, seed)));
    env.set_occluder(None);
    let (initial, first) = match start {
        Some(p) => env.reset_to(p)?,
        None => env.reset(seed)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xac7]));
    let needs_heatmaps = !matches!(controller, Controller::Vision(_));
    let perception = match (needs_heatmaps, perception) {
        (true, None) => {
            return Err(SfnError::Config(format!(
                "{} needs perception models",
                controller.name()
            )))
        }
        (_, p) => p,
    };
    let n = perception.map_or(crate::perception::GRID_N, |p| p.pos.arch().grid_n);
    let mut window: VecDeque<Vec<f32>> = VecDeque::new();
    let mut steps = Vec::new();
    let mut transitions = Vec::new();
    let mut success = first.success;
    let mut force = first.contact_force;
    let mut t = 0usize;
    loop {
        let occluded = occluder.as_ref().is_some_and(|(k, _)| t < *k);
        env.set_occluder(if occluded {
            occluder.as_ref().map(|o| o.1.clone())
        } else {
            None
        });
        let obs = env.observe()?;
        let pose = env.pose();
        let mut heatmaps = None;
        let (state, lp, lo) = match (controller, perception) {
            (Controller::Vision(_), _) => (crate::baselines::vision_state(&obs), 0.0, 0.0),
            (_, Some(p)) => {
                let (phi, d) = p.heatmaps(&obs)?;
                let (lp, lo) = frame_losses(&phi, &d, &pose, &camera);
                let s = policy_state(&phi, &d);
                heatmaps = Some((phi, d));
                (s, lp, lo)
            }
            (_, None) => unreachable!(),
        };
        window.push_back(state);
        while window.len() > controller.history() {
            window.pop_front();
        }
        let win: Vec<Vec<f32>> = window.iter().cloned().collect();
        let explore = cfg.explore.then_some(&mut rng);
        let action = if env.is_terminated() {
            ActionSpec::noop(n, &camera)
        } else {
            match (controller, &heatmaps) {
                (Controller::Sfss, Some((phi, d))) => sfss_action(phi, d, &camera),
                (Controller::Learned(m), _) => act_with(m, &win, explore)?.0,
                (Controller::Vision(m), _) => act_with(m, &win, explore)?.0,
                (Controller::Sfss, None) => unreachable!(),
            }
        };
        if !env.is_terminated() {
            let (_, res) = env.step(action.to_action())?;
            success = res.success;
            force = res.contact_force;
        }
        let r = reward(success, lp, lo, &cfg.reward);
        steps.push(StepRecord {
            step: t + 1,
            pose,
            action,
            reward: r,
            loss_pos: lp,
            loss_ori: lo,
            success,
            occluded,
            contact_force: force,
        });
        transitions.push(Transition {
            window: win,
            action: (action.ix, action.iy, action.ik),
            reward: r,
        });
        t += 1;
        if env.is_terminated() {
            break;
        }
    }
    env.set_occluder(None);
    let record = EpisodeRecord {
        policy: controller.name(),
        shape_id: env.shape().id.clone(),
        clearance: env.shape().clearance,
        seed,
        initial_pose: initial,
        steps,
        success,
        final_pose: env.pose(),
    };
    Ok(Rollout {
        record,
        transitions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub variant: Variant,
    pub episodes: usize,
    pub seed: u64,
    pub n_envs: usize,
    pub hyper: A2cHyper,
    pub reward: RewardConfig,
    pub clearance: f64,
    /// Abort if mean entropy drops below this before 10% of episodes.
    pub entropy_floor: f64,
    /// Occlusion applied to a fraction of training episodes.
    pub occlusion: Option<OcclusionSpec>,
    pub occlusion_prob: f64,
}

impl RlConfig {
    pub fn new(variant: Variant, episodes: usize, seed: u64) -> Self {
        Self {
            variant,
            episodes,
            seed,
            n_envs: 8,
            hyper: A2cHyper::default(),
            reward: RewardConfig::default(),
            clearance: 1.0,
            entropy_floor: 0.05,
            occlusion: None,
            occlusion_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub success: Vec<bool>,
    pub lengths: Vec<usize>,
    pub updates: Vec<A2cDiagnostics>,
}

impl LearningCurve {
    /// Success rate over episodes `[from, to)`.
    pub fn success_rate(&self, from: usize, to: usize) -> f64 {
        let to = to.min(self.success.len());
        if to <= from {
            return 0.0;
        }
        self.success[from..to].iter().filter(|&&s| s).count() as f64 / (to - from) as f64
    }
}

/// Synchronous A2C over `n_envs` environments cycling through `shapes`.
pub fn train_rl(
    shapes: &[ShapeSpec],
    perception: &Perception,
    cfg: &RlConfig,
) -> Result<(ActorCritic, LearningCurve)> {
    let mut arch = AcArch::new(cfg.variant);
    arch.camera = *perception.camera();
    arch.grid_n = perception.pos.arch().grid_n;
    let model = ActorCritic::new(arch, cfg.seed)?;
    train_a2c(model, Controller::Learned, shapes, Some(perception), cfg)
}

/// A2C driver shared by every learned controller.
pub fn train_a2c<N: PolicyNet + Clone>(
    mut model: N,
    wrap: impl Fn(N) -> Controller,
    shapes: &[ShapeSpec],
    perception: Option<&Perception>,
    cfg: &RlConfig,
) -> Result<(N, LearningCurve)> {
    if shapes.is_empty() || cfg.episodes == 0 || cfg.n_envs == 0 {
        return Err(SfnError::Config(
            "training needs shapes, episodes and environments".into(),
        ));
    }
    let mut opt = Adam::new(model.params(), cfg.hyper.lr);
    let mut envs = shapes
        .iter()
        .map(|s| {
            let mut ec = EnvConfig::new(s.with_clearance(cfg.clearance)?);
            ec.k_max = cfg.reward.k_max;
            ec.seed = cfg.seed;
            Env::new(ec)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut curve = LearningCurve::default();
    let mut occ_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x0cc]));
    let mut episode = 0usize;
    while episode < cfg.episodes {
        let batch = cfg.n_envs.min(cfg.episodes - episode);
        let mut trajs = Vec::with_capacity(batch);
        let controller = wrap(model.clone());
        for b in 0..batch {
            let e = episode + b;
            let env = &mut envs[e % shapes.len()];
            let occluded = cfg.occlusion.is_some() && occ_rng.random::<f64>() < cfg.occlusion_prob;
            let run = RunConfig {
                reward: cfg.reward,
                occlusion: if occluded {
                    cfg.occlusion.clone()
                } else {
                    None
                },
                explore: true,
            };
            let seed = derive_seed(cfg.seed, &[0x7a1, e as u64]);
            let ro = rollout(env, &controller, perception, seed, None, &run)?;
            curve.success.push(ro.record.success);
            curve.lengths.push(ro.record.len());
            trajs.push(ro.transitions);
        }
        let diag = a2c_update(&mut model, &mut opt, &trajs, &cfg.hyper)?;
        episode += batch;
        if episode * 10 < cfg.episodes && diag.entropy < cfg.entropy_floor {
            return Err(SfnError::Training(format!(
                "policy entropy collapsed to {:.4} after {episode} episodes",
                diag.entropy
            )));
        }
        curve.updates.push(diag);
    }
    Ok((model, curve))
}
