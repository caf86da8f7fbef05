//! Siamese orientation network: one convolutional feature extractor applied
//! to the peg patch and to each rotated seam patch.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfn_nn::{Checkpoint, Conv2d, ConvCfg, Gradients, Graph, ParamId, ParamStore, Tensor, Var};

use super::util::{
    foreground_centroid, foreground_crop, foreground_outline, rotated_foreground_crop, run_epoch,
    train_rng,
};
use super::{orientation_target, OrientationHeatmap};
use crate::datagen::{bank_angle, LabeledSample, BANK_SIZE};
use crate::error::{Result, SfnError};
use crate::render::{split_channels, CameraModel, SegmentedImage};

pub const ORI_KIND: &str = "orientation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriArch {
    pub patch: usize,
    pub hidden: Vec<usize>,
    pub features: usize,
    pub camera: CameraModel,
}

impl Default for OriArch {
    fn default() -> Self {
        Self {
            patch: 64,
            hidden: vec![8, 8],
            features: 3,
            camera: CameraModel::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OriNet {
    pub arch: OriArch,
    layers: Vec<Conv2d>,
    log_scale: ParamId,
}

#[derive(Clone, Debug)]
pub struct OriModel {
    pub net: OriNet,
    pub store: ParamStore,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OriMeta {
    pub arch: OriArch,
    pub epoch: usize,
}

/// Peg patch and the 11 seam patches of one sample, each `patch²` floats.
#[derive(Clone, Debug)]
pub struct OriInput {
    pub peg: Vec<f32>,
    pub bank: Vec<Vec<f32>>,
}

impl OriNet {
    fn patch_origin(&self, center: (f64, f64)) -> (i64, i64) {
        let h = (self.arch.patch / 2) as i64;
        (center.1.round() as i64 - h, center.0.round() as i64 - h)
    }

    /// Peg patch centred on the peg's pixel centroid.
    pub fn peg_patch(&self, ip: &SegmentedImage) -> Result<Vec<f32>> {
        let c =
            foreground_centroid(ip).ok_or_else(|| SfnError::Input("peg image is empty".into()))?;
        let (r0, c0) = self.patch_origin(c);
        Ok(foreground_crop(
            &foreground_outline(ip),
            r0,
            c0,
            self.arch.patch,
            self.arch.patch,
        ))
    }

    /// Seam patch centred on the hole centre.
    pub fn seam_patch(&self, is: &SegmentedImage) -> Vec<f32> {
        let (r0, c0) = self.patch_origin(self.arch.camera.principal_point);
        foreground_crop(is, r0, c0, self.arch.patch, self.arch.patch)
    }

    /// Inputs for one sample: the bank is rotated in patch space.
    pub fn sample_input(&self, mask: &SegmentedImage) -> Result<OriInput> {
        let (ip, is) = split_channels(mask);
        let pp = self.arch.camera.principal_point;
        let (r0, c0) = self.patch_origin(pp);
        let bank = (0..BANK_SIZE)
            .map(|i| rotated_foreground_crop(&is, bank_angle(i), pp, r0, c0, self.arch.patch))
            .collect();
        Ok(OriInput {
            peg: self.peg_patch(&ip)?,
            bank,
        })
    }

    /// `f_ψ` applied to a stack of patches `[N, 1, P, P]`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if k + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        let ls = g.param(store, self.log_scale);
        let scale = g.exp(ls);
        let n = g.value(h).numel();
        let scale = g.broadcast_cols(scale, n);
        let shape = g.value(h).shape().to_vec();
        let scale = g.reshape(scale, &shape);
        g.mul(h, scale)
    }

    /// Similarities `D_i` for the bank, as graph nodes.
    fn similarities(&self, g: &mut Graph, store: &ParamStore, input: &OriInput) -> Vec<Var> {
        let p = self.arch.patch;
        let mut data = Vec::with_capacity((BANK_SIZE + 1) * p * p);
        data.extend_from_slice(&input.peg);
        for b in &input.bank {
            data.extend_from_slice(b);
        }
        let x = g.constant(Tensor::new(&[BANK_SIZE + 1, 1, p, p], data));
        let u = self.features(g, store, x);
        let numel = (self.arch.features * p * p) as f32;
        let up = g.slice(u, 0, 0, 1);
        (0..BANK_SIZE)
            .map(|i| {
                let us = g.slice(u, 0, i + 1, 1);
                let diff = g.sub(up, us);
                let sq = g.square(diff);
                let ss = g.sum(sq);
                let d = g.sqrt_eps(ss, 1e-12);
                let d = g.scale(d, -1.0 / numel.sqrt());
                g.exp(d)
            })
            .collect()
    }

    pub fn heatmap_from_input(&self, store: &ParamStore, input: &OriInput) -> OrientationHeatmap {
        let mut g = Graph::new();
        let ds = self.similarities(&mut g, store, input);
        OrientationHeatmap {
            values: ds.iter().map(|&v| g.value(v).item()).collect(),
        }
    }

    /// Batched contrastive hinge of one sample and its gradients.
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        input: &OriInput,
        positive: usize,
    ) -> (f64, Gradients) {
        let mut g = Graph::new();
        let ds = self.similarities(&mut g, store, input);
        let dp = ds[positive];
        let mut terms = Vec::with_capacity(BANK_SIZE - 1);
        for (i, &dn) in ds.iter().enumerate() {
            if i == positive {
                continue;
            }
            let m = g.sub(dn, dp);
            let m = g.add_scalar(m, 1.0);
            terms.push(g.relu(m));
        }
        let all = g.concat(&terms, 0);
        let loss = g.mean(all);
        let value = g.value(loss).item() as f64;
        (value, g.backward(loss))
    }
}

impl OriModel {
    pub fn new(arch: OriArch, seed: u64) -> Result<Self> {
        if arch.patch == 0 || arch.features == 0 {
            return Err(SfnError::Config(
                "orientation patch and features must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut c_in = 1;
        let widths: Vec<usize> = arch.hidden.iter().copied().chain([arch.features]).collect();
        for (k, &w) in widths.iter().enumerate() {
            layers.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("ori.c{k}"),
                c_in,
                w,
                3,
                ConvCfg::same(3, 1 << k),
                2.0,
            ));
            c_in = w;
        }
        let log_scale = store.add("ori.log_scale", Tensor::full(&[1], 0.0));
        Ok(Self {
            net: OriNet {
                arch,
                layers,
                log_scale,
            },
            store,
        })
    }

    pub fn arch(&self) -> &OriArch {
        &self.net.arch
    }

    /// Heatmap from a peg image and 11 rotated seam images.
    pub fn heatmap(
        &self,
        ip: &SegmentedImage,
        bank: &[SegmentedImage],
    ) -> Result<OrientationHeatmap> {
        if bank.len() != BANK_SIZE {
            return Err(SfnError::Input(format!(
                "bank must hold {BANK_SIZE} images, got {}",
                bank.len()
            )));
        }
        let input = OriInput {
            peg: self.net.peg_patch(ip)?,
            bank: bank.iter().map(|b| self.net.seam_patch(b)).collect(),
        };
        Ok(self.net.heatmap_from_input(&self.store, &input))
    }

    /// Heatmap straight from a segmented observation.
    pub fn predict(&self, mask: &SegmentedImage) -> Result<OrientationHeatmap> {
        let input = self.net.sample_input(mask)?;
        Ok(self.net.heatmap_from_input(&self.store, &input))
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let meta = OriMeta {
            arch: self.net.arch.clone(),
            epoch,
        };
        Checkpoint::new(ORI_KIND, meta, self.store.clone()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint<OriMeta> = Checkpoint::load(path, ORI_KIND)?;
        let mut m = Self::new(ck.meta.arch, 0)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OriTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub arch: OriArch,
}

impl Default for OriTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 4,
            lr: 3e-3,
            seed: 0,
            arch: OriArch::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OriEval {
    pub count: usize,
    pub top1: f64,
    pub within_one: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val: OriEval,
}

pub fn evaluate_orientation(model: &OriModel, samples: &[LabeledSample]) -> Result<OriEval> {
    let (mut top1, mut near) = (0usize, 0usize);
    for s in samples {
        let got = model.predict(&s.mask)?.argmax();
        let want = orientation_target(&s.pose);
        top1 += (got == want) as usize;
        near += (got.abs_diff(want) <= 1) as usize;
    }
    let c = samples.len().max(1) as f64;
    Ok(OriEval {
        count: samples.len(),
        top1: top1 as f64 / c,
        within_one: near as f64 / c,
    })
}

pub fn train_orientation(
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &OriTrainConfig,
) -> Result<(OriModel, OriTrainReport)> {
    if train.is_empty() {
        return Err(SfnError::Training("empty training set".into()));
    }
    let mut model = OriModel::new(cfg.arch.clone(), cfg.seed)?;
    let inputs = train
        .iter()
        .map(|s| model.net.sample_input(&s.mask))
        .collect::<Result<Vec<_>>>()?;
    let positives: Vec<usize> = train.iter().map(|s| orientation_target(&s.pose)).collect();
    let mut opt = sfn_nn::Adam::new(&model.store, cfg.lr);
    let mut rng = train_rng(cfg.seed ^ 0x4f52);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let net = &model.net;
        let loss = run_epoch(
            &mut model.store,
            &mut opt,
            train.len(),
            cfg.batch,
            &mut rng,
            |st, k| net.loss_and_grad(st, &inputs[k], positives[k]),
        );
        if !loss.is_finite() {
            return Err(SfnError::Training("orientation loss diverged".into()));
        }
        losses.push(loss);
    }
    let val = evaluate_orientation(&model, val)?;
    Ok((
        model,
        OriTrainReport {
            epoch_losses: losses,
            val,
        },
    ))
}
