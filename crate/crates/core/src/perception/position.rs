//! Position network: encoder-decoder over a region around the hole centre,
//! a spatial soft-argmax keypoint and a Gaussian heatmap head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfn_nn::{Adam, Checkpoint, Conv2d, ConvCfg, Graph, ParamId, ParamStore, Tensor, Var};

use super::util::{label_crop, run_epoch, stack_planes, train_rng};
use super::{cell_distance, position_cell, position_target_for_pose, PositionHeatmap, GRID_N};
use crate::datagen::LabeledSample;
use crate::error::{Result, SfnError};
use crate::render::{CameraModel, SegmentedImage, PEG, SEAM};
use crate::sim::Pose;

pub const POS_KIND: &str = "position";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosArch {
    pub roi: usize,
    pub grid_n: usize,
    pub widths: [usize; 3],
    pub camera: CameraModel,
}

impl Default for PosArch {
    fn default() -> Self {
        Self {
            roi: 96,
            grid_n: GRID_N,
            widths: [8, 16, 16],
            camera: CameraModel::default(),
        }
    }
}

/// Layer handles of the position network; parameter values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PosNet {
    pub arch: PosArch,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    out: Conv2d,
    peak: ParamId,
    sharp: ParamId,
    bg: ParamId,
}

#[derive(Clone, Debug)]
pub struct PosModel {
    pub net: PosNet,
    pub store: ParamStore,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosMeta {
    pub arch: PosArch,
    pub epoch: usize,
}

impl PosNet {
    fn roi_origin(&self) -> (i64, i64) {
        let (ppc, ppr) = self.arch.camera.principal_point;
        let h = (self.arch.roi / 2) as i64;
        (ppr.floor() as i64 - h, ppc.floor() as i64 - h)
    }

    /// Two binary planes (peg, seam) over the region of interest.
    pub fn input(&self, img: &SegmentedImage) -> Result<Tensor> {
        let cam = &self.arch.camera;
        if img.width != cam.image_width || img.height != cam.image_height {
            return Err(SfnError::Input(format!(
                "expected {}x{} image, got {}x{}",
                cam.image_width, cam.image_height, img.width, img.height
            )));
        }
        let (r0, c0) = self.roi_origin();
        let n = self.arch.roi;
        let peg = label_crop(img, PEG, r0, c0, n, n);
        let seam = label_crop(img, SEAM, r0, c0, n, n);
        Ok(stack_planes(&[peg, seam], n, n))
    }

    /// Soft-argmax keypoint and heatmap logits `z0 − z1`.
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Tensor) -> (Var, Var) {
        let n = self.arch.roi;
        let x = g.input(x);
        let a1 = self.e1.forward(g, s, x);
        let a1 = g.relu(a1);
        let p1 = g.maxpool2(a1);
        let a2 = self.e2.forward(g, s, p1);
        let a2 = g.relu(a2);
        let p2 = g.maxpool2(a2);
        let a3 = self.e3.forward(g, s, p2);
        let a3 = g.relu(a3);
        let u2 = g.upsample2(a3, n / 2, n / 2);
        let c2 = g.concat(&[u2, a2], 1);
        let b2 = self.d2.forward(g, s, c2);
        let b2 = g.relu(b2);
        let u1 = g.upsample2(b2, n, n);
        let c1 = g.concat(&[u1, a1], 1);
        let b1 = self.d1.forward(g, s, c1);
        let b1 = g.relu(b1);
        let z = self.out.forward(g, s, b1);
        let (r0, c0) = self.roi_origin();
        let (ppc, ppr) = self.arch.camera.principal_point;
        let qx: Vec<f64> = (0..n).map(|c| (c0 + c as i64) as f64 + 0.5 - ppc).collect();
        let qy: Vec<f64> = (0..n)
            .map(|r| ppr - ((r0 + r as i64) as f64 + 0.5))
            .collect();
        let mu = soft_argmax(g, z, qx, qy);
        let peak = g.param(s, self.peak);
        let sharp = g.param(s, self.sharp);
        let bg = g.param(s, self.bg);
        let logits = gaussian_head(g, mu, peak, sharp, bg, self.arch.grid_n);
        (mu, logits)
    }

    pub fn predict(&self, store: &ParamStore, img: &SegmentedImage) -> Result<PositionHeatmap> {
        let mut g = Graph::new();
        let (_, logits) = self.forward(&mut g, store, self.input(img)?);
        Ok(PositionHeatmap {
            n: self.arch.grid_n,
            values: g
                .value(logits)
                .data()
                .iter()
                .map(|&l| sfn_nn::ops::sigmoid(l))
                .collect(),
        })
    }

    /// Summed heatmap BCE of one example and its gradients.
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        img: &SegmentedImage,
        target: &PositionHeatmap,
    ) -> Result<(f64, sfn_nn::Gradients)> {
        let mut g = Graph::new();
        let (_, logits) = self.forward(&mut g, store, self.input(img)?);
        let loss = bce_with_logits(&mut g, logits, &target.values);
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss)))
    }
}

impl PosModel {
    pub fn new(arch: PosArch, seed: u64) -> Result<Self> {
        if arch.roi % 4 != 0 || arch.grid_n % 2 == 0 {
            return Err(SfnError::Config(
                "roi must be a multiple of 4 and grid odd".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [w1, w2, w3] = arch.widths;
        let c3 = ConvCfg::same(3, 1);
        let e1 = Conv2d::new(&mut store, &mut rng, "pos.e1", 2, w1, 3, c3, 1.0);
        let e2 = Conv2d::new(&mut store, &mut rng, "pos.e2", w1, w2, 3, c3, 1.0);
        let e3 = Conv2d::new(&mut store, &mut rng, "pos.e3", w2, w3, 3, c3, 1.0);
        let d2 = Conv2d::new(&mut store, &mut rng, "pos.d2", w3 + w2, w1, 3, c3, 1.0);
        let d1 = Conv2d::new(&mut store, &mut rng, "pos.d1", w1 + w1, w1, 3, c3, 1.0);
        let out = Conv2d::new(
            &mut store,
            &mut rng,
            "pos.out",
            w1,
            1,
            1,
            ConvCfg::default(),
            1.0,
        );
        let prior = ((arch.grid_n * arch.grid_n) as f32).ln();
        let peak = store.add("pos.head.peak", Tensor::full(&[1], prior));
        let sharp = store.add("pos.head.sharp", Tensor::zeros(&[1]));
        let bg = store.add("pos.head.bg", Tensor::full(&[1], prior));
        let net = PosNet {
            arch,
            e1,
            e2,
            e3,
            d2,
            d1,
            out,
            peak,
            sharp,
            bg,
        };
        Ok(Self { net, store })
    }

    pub fn arch(&self) -> &PosArch {
        &self.net.arch
    }

    pub fn predict(&self, img: &SegmentedImage) -> Result<PositionHeatmap> {
        self.net.predict(&self.store, img)
    }

    pub fn loss_and_grad(
        &self,
        img: &SegmentedImage,
        target: &PositionHeatmap,
    ) -> Result<(f64, sfn_nn::Gradients)> {
        self.net.loss_and_grad(&self.store, img, target)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let meta = PosMeta {
            arch: self.net.arch.clone(),
            epoch,
        };
        Checkpoint::new(POS_KIND, meta, self.store.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint<PosMeta> = Checkpoint::load(path, POS_KIND)?;
        let mut m = Self::new(ck.meta.arch, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

/// `μ = Σ softmax(z)·q` over pixel offsets `q` (x to the right, y up).
fn soft_argmax(g: &mut Graph, z: Var, qx: Vec<f64>, qy: Vec<f64>) -> Var {
    let zv = g.value(z).clone();
    let (h, wd) = (qy.len(), qx.len());
    let d = zv.data();
    let m = d.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = d.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let p: Vec<f64> = e.iter().map(|v| v / s).collect();
    let (mut mx, mut my) = (0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..wd {
            mx += p[r * wd + c] * qx[c];
            my += p[r * wd + c] * qy[r];
        }
    }
    let shape = zv.shape().to_vec();
    g.op(
        &[z],
        Tensor::new(&[2], vec![mx as f32, my as f32]),
        move |gr, _, _| {
            let (gx, gy) = (gr.data()[0] as f64, gr.data()[1] as f64);
            let mut out = Tensor::zeros(&shape);
            let od = out.data_mut();
            for r in 0..h {
                for c in 0..wd {
                    let k = r * wd + c;
                    od[k] = (p[k] * (gx * (qx[c] - mx) + gy * (qy[r] - my))) as f32;
                }
            }
            vec![out]
        },
    )
}

/// Per-cell logit `peak − softplus(sharp)·‖cell − μ‖² − bg`, cells indexed
/// `(i, j)` with offsets `(i − n/2, j − n/2)`.
fn gaussian_head(g: &mut Graph, mu: Var, peak: Var, sharp: Var, bg: Var, n: usize) -> Var {
    let h = (n / 2) as f64;
    let m = g.value(mu).data().to_vec();
    let (mx, my) = (m[0] as f64, m[1] as f64);
    let a = g.value(peak).item() as f64;
    let braw = g.value(sharp).item() as f64;
    let b = sfn_nn::ops::softplus(braw as f32) as f64;
    let z1 = g.value(bg).item() as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (ex, ey) = (i as f64 - h - mx, j as f64 - h - my);
            out.push((a - b * (ex * ex + ey * ey) - z1) as f32);
        }
    }
    g.op(
        &[mu, peak, sharp, bg],
        Tensor::new(&[n * n], out),
        move |gr, _, _| {
            let gd = gr.data();
            let (mut gmx, mut gmy, mut ga, mut gb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for i in 0..n {
                for j in 0..n {
                    let gv = gd[i * n + j] as f64;
                    let (ex, ey) = (i as f64 - h - mx, j as f64 - h - my);
                    gmx += gv * 2.0 * b * ex;
                    gmy += gv * 2.0 * b * ey;
                    ga += gv;
                    gb -= gv * (ex * ex + ey * ey);
                }
            }
            let dsp = sfn_nn::ops::sigmoid(braw as f32) as f64;
            vec![
                Tensor::new(&[2], vec![gmx as f32, gmy as f32]),
                Tensor::scalar(ga as f32),
                Tensor::scalar((gb * dsp) as f32),
                Tensor::scalar(-ga as f32),
            ]
        },
    )
}

/// Summed binary cross-entropy of `σ(logits)` against `target` in the
/// stable form `softplus(l) − t·l`. No probability clip, so confidently
/// wrong cells keep their gradient.
pub fn bce_with_logits(g: &mut Graph, logits: Var, target: &[f32]) -> Var {
    let l = g.value(logits).data().to_vec();
    let mut total = 0.0f64;
    let mut dl = Vec::with_capacity(l.len());
    for (k, &lv) in l.iter().enumerate() {
        let (z, t) = (lv as f64, target[k] as f64);
        total += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
        dl.push((1.0 / (1.0 + (-z).exp()) - t) as f32);
    }
    let shape = g.value(logits).shape().to_vec();
    g.op(&[logits], Tensor::scalar(total as f32), move |gr, _, _| {
        let s = gr.item();
        vec![Tensor::new(&shape, dl.iter().map(|&v| v * s).collect())]
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub arch: PosArch,
}

impl Default for PosTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            arch: PosArch::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PosEval {
    pub count: usize,
    pub exact: f64,
    pub within_one: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val: PosEval,
}

/// Position accuracy against the clipped ground-truth cell of each sample.
pub fn evaluate_position(model: &PosModel, samples: &[LabeledSample]) -> Result<PosEval> {
    let n = model.arch().grid_n;
    let cam = &model.arch().camera;
    let h = n / 2;
    let (mut exact, mut near, mut loss) = (0usize, 0usize, 0.0);
    for s in samples {
        let hm = model.predict(&s.mask)?;
        let (dx, dy) = position_cell(&s.pose, cam, n);
        let want = ((dx + h as i64) as usize, (dy + h as i64) as usize);
        let got = hm.argmax();
        exact += (got == want) as usize;
        near += (cell_distance(got, want) <= 1) as usize;
        loss += super::heatmap_bce(&hm, &position_target_for_pose(&s.pose, cam, n));
    }
    let c = samples.len().max(1) as f64;
    Ok(PosEval {
        count: samples.len(),
        exact: exact as f64 / c,
        within_one: near as f64 / c,
        mean_loss: loss / c,
    })
}

pub fn train_position(
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &PosTrainConfig,
) -> Result<(PosModel, PosTrainReport)> {
    if train.is_empty() {
        return Err(SfnError::Training("empty training set".into()));
    }
    let mut model = PosModel::new(cfg.arch.clone(), cfg.seed)?;
    let targets: Vec<PositionHeatmap> = train
        .iter()
        .map(|s| position_target_for_pose(&s.pose, &cfg.arch.camera, cfg.arch.grid_n))
        .collect();
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = train_rng(cfg.seed ^ 0x5057);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut failure = None;
        let net = &model.net;
        let loss = run_epoch(
            &mut model.store,
            &mut opt,
            train.len(),
            cfg.batch,
            &mut rng,
            |st, k| match net.loss_and_grad(st, &train[k].mask, &targets[k]) {
                Ok(r) => r,
                Err(e) => {
                    failure.get_or_insert(e);
                    (0.0, sfn_nn::Gradients::default())
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if !loss.is_finite() {
            return Err(SfnError::Training("position loss diverged".into()));
        }
        losses.push(loss);
    }
    let val = evaluate_position(&model, val)?;
    Ok((
        model,
        PosTrainReport {
            epoch_losses: losses,
            val,
        },
    ))
}

/// Predicted pose error in millimetres from the heatmap argmax.
pub fn heatmap_displacement(hm: &PositionHeatmap, camera: &CameraModel) -> (f64, f64) {
    let (i, j) = hm.argmax();
    let h = hm.center() as i64;
    crate::render::pixel_to_world(camera, i as i64 - h, j as i64 - h)
}

/// Ground-truth position heatmap for a pose error.
pub fn target_for(pose: &Pose, camera: &CameraModel) -> PositionHeatmap {
    position_target_for_pose(pose, camera, GRID_N)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keypoint(z: &[f32], qx: &[f64], qy: &[f64]) -> (Vec<f32>, Vec<f32>) {
        let mut g = Graph::new();
        let zv = g.input(Tensor::new(&[1, 1, qy.len(), qx.len()], z.to_vec()));
        let mu = soft_argmax(&mut g, zv, qx.to_vec(), qy.to_vec());
        let w = g.constant(Tensor::new(&[2], vec![1.0, -0.5]));
        let prod = g.mul(mu, w);
        let loss = g.sum(prod);
        let (_, inputs) = g.backward_with_inputs(loss);
        (
            g.value(mu).data().to_vec(),
            inputs[&zv.index()].data().to_vec(),
        )
    }

    #[test]
    fn soft_argmax_gradient_matches_finite_differences() {
        let (qx, qy) = (vec![-1.5, -0.5, 0.5, 1.5], vec![1.0, 0.0, -1.0]);
        let z: Vec<f32> = (0..12).map(|k| ((k * 7 % 5) as f32 - 2.0) * 0.3).collect();
        let (_, grad) = keypoint(&z, &qx, &qy);
        for k in 0..12 {
            let h = 1e-2f32;
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let f = |v: &[f32]| {
                let m = keypoint(v, &qx, &qy).0;
                m[0] as f64 - 0.5 * m[1] as f64
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h as f64);
            assert!(
                (grad[k] as f64 - fd).abs() < 1e-3,
                "{k}: {} vs {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn peaked_logits_give_their_offset() {
        let (qx, qy) = (vec![-1.0, 0.0, 1.0], vec![1.0, 0.0, -1.0]);
        let mut z = vec![0.0f32; 9];
        z[2] = 40.0;
        let (mu, _) = keypoint(&z, &qx, &qy);
        assert!((mu[0] - 1.0).abs() < 1e-5 && (mu[1] - 1.0).abs() < 1e-5);
    }
}
