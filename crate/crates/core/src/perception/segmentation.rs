//! Three-class segmentation of RGB frames with a small encoder-decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfn_nn::{Adam, Checkpoint, Conv2d, ConvCfg, Gradients, Graph, ParamStore, Tensor, Var};

use super::mean_iou;
use super::util::{run_epoch, train_rng};
use crate::datagen::{LabeledSample, RgbImage};
use crate::error::{Result, SfnError};
use crate::render::SegmentedImage;

pub const SEG_KIND: &str = "segmentation";
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegArch {
    pub widths: [usize; 3],
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            widths: [8, 16, 16],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    pub arch: SegArch,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub net: SegNet,
    pub store: ParamStore,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegMeta {
    pub arch: SegArch,
    pub epoch: usize,
}

/// Channels-first RGB scaled to `[-1, 1]`.
pub fn rgb_tensor(rgb: &RgbImage) -> Tensor {
    let hw = rgb.width * rgb.height;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = rgb.data[p * 3 + ch] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[1, 3, rgb.height, rgb.width], data)
}

/// Mean per-pixel cross-entropy of `[1, K, H, W]` logits.
fn pixel_cross_entropy(g: &mut Graph, logits: Var, labels: &[u8]) -> Var {
    let lv = g.value(logits);
    let k = lv.dim(1);
    let hw = lv.numel() / k;
    let d = lv.data();
    let mut grad = vec![0.0f32; k * hw];
    let mut total = 0.0f64;
    for p in 0..hw {
        let m = (0..k)
            .map(|c| d[c * hw + p])
            .fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = (0..k).map(|c| ((d[c * hw + p] - m) as f64).exp()).sum();
        let y = labels[p] as usize;
        total += z.ln() - (d[y * hw + p] - m) as f64;
        for c in 0..k {
            let prob = ((d[c * hw + p] - m) as f64).exp() / z;
            grad[c * hw + p] = ((prob - (c == y) as u8 as f64) / hw as f64) as f32;
        }
    }
    let shape = lv.shape().to_vec();
    g.op(
        &[logits],
        Tensor::scalar((total / hw as f64) as f32),
        move |gr, _, _| {
            let s = gr.item();
            vec![Tensor::new(&shape, grad.iter().map(|&v| v * s).collect())]
        },
    )
}

impl SegNet {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Tensor) -> Var {
        let (h, w) = (x.dim(2), x.dim(3));
        let x = g.input(x);
        let a1 = self.e1.forward(g, s, x);
        let a1 = g.relu(a1);
        let p1 = g.maxpool2(a1);
        let a2 = self.e2.forward(g, s, p1);
        let a2 = g.relu(a2);
        let p2 = g.maxpool2(a2);
        let a3 = self.e3.forward(g, s, p2);
        let a3 = g.relu(a3);
        let u2 = g.upsample2(a3, h / 2, w / 2);
        let c2 = g.concat(&[u2, a2], 1);
        let b2 = self.d2.forward(g, s, c2);
        let b2 = g.relu(b2);
        let u1 = g.upsample2(b2, h, w);
        let c1 = g.concat(&[u1, a1], 1);
        let b1 = self.d1.forward(g, s, c1);
        let b1 = g.relu(b1);
        self.out.forward(g, s, b1)
    }

    pub fn predict(&self, store: &ParamStore, rgb: &RgbImage) -> SegmentedImage {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, store, rgb_tensor(rgb));
        let d = g.value(logits).data();
        let hw = rgb.width * rgb.height;
        let mut out = SegmentedImage::new(rgb.width, rgb.height);
        for p in 0..hw {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            out.labels[p] = best as u8;
        }
        out
    }

    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        rgb: &RgbImage,
        mask: &SegmentedImage,
    ) -> Result<(f64, Gradients)> {
        if rgb.width != mask.width || rgb.height != mask.height {
            return Err(SfnError::Input("rgb and mask sizes differ".into()));
        }
        let mut g = Graph::new();
        let logits = self.forward(&mut g, store, rgb_tensor(rgb));
        let loss = pixel_cross_entropy(&mut g, logits, &mask.labels);
        let value = g.value(loss).item() as f64;
        Ok((value, g.backward(loss)))
    }
}

impl SegModel {
    pub fn new(arch: SegArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [w1, w2, w3] = arch.widths;
        if w1 == 0 || w2 == 0 || w3 == 0 {
            return Err(SfnError::Config(
                "segmentation widths must be positive".into(),
            ));
        }
        let c3 = ConvCfg::same(3, 1);
        let e1 = Conv2d::new(&mut store, &mut rng, "seg.e1", 3, w1, 3, c3, 1.0);
        let e2 = Conv2d::new(&mut store, &mut rng, "seg.e2", w1, w2, 3, c3, 1.0);
        let e3 = Conv2d::new(&mut store, &mut rng, "seg.e3", w2, w3, 3, c3, 1.0);
        let d2 = Conv2d::new(&mut store, &mut rng, "seg.d2", w3 + w2, w1, 3, c3, 1.0);
        let d1 = Conv2d::new(&mut store, &mut rng, "seg.d1", w1 + w1, w1, 3, c3, 1.0);
        let out = Conv2d::new(
            &mut store,
            &mut rng,
            "seg.out",
            w1,
            NUM_CLASSES,
            1,
            ConvCfg::default(),
            1.0,
        );
        Ok(Self {
            net: SegNet {
                arch,
                e1,
                e2,
                e3,
                d2,
                d1,
                out,
            },
            store,
        })
    }

    /// Label image; always within `{0, 1, 2}`.
    pub fn predict(&self, rgb: &RgbImage) -> SegmentedImage {
        self.net.predict(&self.store, rgb)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let meta = SegMeta {
            arch: self.net.arch.clone(),
            epoch,
        };
        Checkpoint::new(SEG_KIND, meta, self.store.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint<SegMeta> = Checkpoint::load(path, SEG_KIND)?;
        let mut m = Self::new(ck.meta.arch, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub arch: SegArch,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 1,
            lr: 1e-3,
            seed: 0,
            arch: SegArch::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_mean_iou: f64,
}

pub fn evaluate_segmentation(model: &SegModel, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(SfnError::Input("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += mean_iou(&model.predict(&s.rgb), &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

pub fn train_segmentation(
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &SegTrainConfig,
) -> Result<(SegModel, SegTrainReport)> {
    if train.is_empty() {
        return Err(SfnError::Training("empty training set".into()));
    }
    let mut model = SegModel::new(cfg.arch.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = train_rng(cfg.seed ^ 0x5345);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = if epoch * 10 >= cfg.epochs * 7 {
            cfg.lr * 0.2
        } else {
            cfg.lr
        };
        let net = &model.net;
        let mut failure = None;
        let loss = run_epoch(
            &mut model.store,
            &mut opt,
            train.len(),
            cfg.batch,
            &mut rng,
            |st, k| match net.loss_and_grad(st, &train[k].rgb, &train[k].mask) {
                Ok(r) => r,
                Err(e) => {
                    failure.get_or_insert(e);
                    (0.0, Gradients::default())
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if !loss.is_finite() {
            return Err(SfnError::Training("segmentation loss diverged".into()));
        }
        losses.push(loss);
    }
    let val_mean_iou = if val.is_empty() {
        f64::NAN
    } else {
        evaluate_segmentation(&model, val)?
    };
    Ok((
        model,
        SegTrainReport {
            epoch_losses: losses,
            val_mean_iou,
        },
    ))
}
