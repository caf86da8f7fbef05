//! Heatmap targets, losses and metrics shared by the perception networks.

pub mod orientation;
pub mod position;
pub mod segmentation;
pub(crate) mod util;

use serde::{Deserialize, Serialize};

use crate::datagen::{orientation_index, BANK_SIZE};
use crate::error::{Result, SfnError};
use crate::render::{world_to_pixel, CameraModel, SegmentedImage};
use crate::sim::Pose;

pub use orientation::{OriModel, OriTrainConfig};
pub use position::{PosModel, PosTrainConfig};
pub use segmentation::{SegModel, SegTrainConfig};

/// Default heatmap side; covers ±20 px = ±10 mm at 2 px/mm.
pub const GRID_N: usize = 41;
/// Probability clipping used inside logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// `n × n` grid stored row-major as `values[i * n + j]`, where `i` indexes
/// the x offset and `j` the y offset (both relative to the centre `n / 2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionHeatmap {
    pub n: usize,
    pub values: Vec<f32>,
}

impl PositionHeatmap {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n + j]
    }

    /// Cell of the maximum; ties go to the smallest row-major index.
    pub fn argmax(&self) -> (usize, usize) {
        let k = sfn_nn::tensor::argmax(&self.values);
        (k / self.n, k % self.n)
    }

    pub fn center(&self) -> usize {
        self.n / 2
    }
}

/// One-hot target at `(dx + n/2, dy + n/2)` for a pixel offset `(dx, dy)`.
pub fn make_position_target(dx_px: i64, dy_px: i64, n: usize) -> Result<PositionHeatmap> {
    let h = (n / 2) as i64;
    if dx_px.abs() > h || dy_px.abs() > h {
        return Err(SfnError::Range(format!(
            "displacement ({dx_px}, {dy_px}) px outside ±{h}"
        )));
    }
    let mut hm = PositionHeatmap::zeros(n);
    hm.values[((dx_px + h) as usize) * n + (dy_px + h) as usize] = 1.0;
    Ok(hm)
}

/// Pixel offset of the position error, clipped to the grid.
pub fn position_cell(pose: &Pose, camera: &CameraModel, n: usize) -> (i64, i64) {
    let h = (n / 2) as i64;
    let (dx, dy) = world_to_pixel(camera, pose.x, pose.y);
    (dx.clamp(-h, h), dy.clamp(-h, h))
}

/// Training target for a pose error; out-of-grid errors are clipped to the
/// boundary.
pub fn position_target_for_pose(pose: &Pose, camera: &CameraModel, n: usize) -> PositionHeatmap {
    let (dx, dy) = position_cell(pose, camera, n);
    make_position_target(dx, dy, n).expect("clipped into range")
}

fn clip_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Summed binary cross-entropy over all cells.
pub fn bce_heatmap_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "heatmap size mismatch");
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clip_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

/// Derivative of [`bce_heatmap_loss`] with respect to each prediction
/// (zero where the clip is active).
pub fn bce_heatmap_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                0.0
            } else {
                -(t / p) + (1.0 - t) / (1.0 - p)
            }
        })
        .collect()
}

pub fn heatmap_bce(pred: &PositionHeatmap, target: &PositionHeatmap) -> f64 {
    let p: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let t: Vec<f64> = target.values.iter().map(|&v| v as f64).collect();
    bce_heatmap_loss(&p, &t)
}

/// Similarity from a feature distance.
pub fn similarity(d: f64) -> f64 {
    (-d).exp()
}

/// `max(D_n − D_p + 1, 0)`.
pub fn contrastive_loss(d_p: f64, d_n: f64) -> f64 {
    (d_n - d_p + 1.0).max(0.0)
}

/// Gradient of [`contrastive_loss`] with respect to `(D_p, D_n)`.
pub fn contrastive_grad(d_p: f64, d_n: f64) -> (f64, f64) {
    if d_n - d_p + 1.0 > 0.0 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Hinge averaged over every negative bin of an orientation heatmap.
pub fn contrastive_loss_batched(heatmap: &[f64], positive: usize) -> f64 {
    let negs: Vec<f64> = heatmap
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != positive)
        .map(|(_, &d)| contrastive_loss(heatmap[positive], d))
        .collect();
    negs.iter().sum::<f64>() / negs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationHeatmap {
    pub values: Vec<f32>,
}

impl OrientationHeatmap {
    pub fn from_distances(d: &[f64]) -> Result<Self> {
        if d.len() != BANK_SIZE {
            return Err(SfnError::Input(format!(
                "expected {BANK_SIZE} distances, got {}",
                d.len()
            )));
        }
        Ok(Self {
            values: d.iter().map(|&v| similarity(v) as f32).collect(),
        })
    }

    pub fn argmax(&self) -> usize {
        sfn_nn::tensor::argmax(&self.values)
    }
}

/// Orientation bin of a pose error.
pub fn orientation_target(pose: &Pose) -> usize {
    orientation_index(pose.theta)
}

/// Mean over classes present in either image of intersection over union.
pub fn mean_iou(pred: &SegmentedImage, gt: &SegmentedImage) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(SfnError::Input("image dimensions differ".into()));
    }
    let mut inter = [0usize; 3];
    let mut union = [0usize; 3];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let ious: Vec<f64> = (0..3)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    Ok(if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    })
}

/// Chebyshev distance between two grid cells.
pub fn cell_distance(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{BACKGROUND, PEG, SEAM};

    #[test]
    fn position_target_examples() {
        assert_eq!(make_position_target(0, 0, 41).unwrap().argmax(), (20, 20));
        assert_eq!(make_position_target(3, -2, 41).unwrap().argmax(), (23, 18));
        assert!(matches!(
            make_position_target(21, 0, 41),
            Err(SfnError::Range(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let n = 41;
        let t = make_position_target(2, 5, n).unwrap();
        let tv: Vec<f64> = t.values.iter().map(|&v| v as f64).collect();
        assert!(bce_heatmap_loss(&tv, &tv) <= (n * n) as f64 * -(1.0 - BCE_EPS).ln() + 1e-12);
        let half = vec![0.5; n * n];
        let expected = (n * n) as f64 * 2f64.ln();
        assert!((bce_heatmap_loss(&half, &tv) - expected).abs() < 1e-9);
        assert!((expected - 1165.1804).abs() < 1e-4);
    }

    #[test]
    fn contrastive_examples() {
        assert!(contrastive_loss(1.0, 1e-12) < 1e-9);
        assert_eq!(contrastive_loss(0.4, 0.4), 1.0);
        assert!((contrastive_loss(0.2, 0.9) - 1.7).abs() < 1e-12);
        assert!((similarity(1.0) - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn batched_contrastive_averages_negatives() {
        let mut d = vec![0.5; 11];
        d[3] = 1.0;
        assert!((contrastive_loss_batched(&d, 3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let mut gt = SegmentedImage::new(4, 1);
        gt.labels = vec![BACKGROUND, PEG, SEAM, BACKGROUND];
        assert_eq!(mean_iou(&gt, &gt).unwrap(), 1.0);
        let bg = SegmentedImage::new(4, 1);
        let v = mean_iou(&bg, &gt).unwrap();
        assert!((v - (0.5 + 0.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!(mean_iou(&SegmentedImage::new(3, 1), &gt).is_err());
    }

    #[test]
    fn clipped_target_for_far_pose() {
        let cam = CameraModel::default();
        let t = position_target_for_pose(&Pose::planar(15.0, -0.3, 0.0), &cam, 41);
        assert_eq!(t.argmax(), (40, 19));
    }
}
