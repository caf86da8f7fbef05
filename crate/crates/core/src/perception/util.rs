use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfn_nn::{Adam, Gradients, ParamStore, Tensor};

use crate::render::SegmentedImage;

/// Binary crop of `label` as `f32`; pixels outside the image read as 0.
pub fn label_crop(
    img: &SegmentedImage,
    label: u8,
    r0: i64,
    c0: i64,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let sr = r0 + r as i64;
        if sr < 0 || sr >= img.height as i64 {
            continue;
        }
        for c in 0..w {
            let sc = c0 + c as i64;
            if sc < 0 || sc >= img.width as i64 {
                continue;
            }
            if img.labels[sr as usize * img.width + sc as usize] == label {
                out[r * w + c] = 1.0;
            }
        }
    }
    out
}

/// Stacks per-channel planes into a `[1, C, h, w]` tensor.
pub fn stack_planes(planes: &[Vec<f32>], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        data.extend_from_slice(p);
    }
    Tensor::new(&[1, planes.len(), h, w], data)
}

/// Mini-batch loop shared by the perception trainers. `sample_grad` returns
/// the loss and gradients of one example; gradients are averaged per batch.
pub fn run_epoch<F>(
    store: &mut ParamStore,
    opt: &mut Adam,
    n_items: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
    mut sample_grad: F,
) -> f64
where
    F: FnMut(&ParamStore, usize) -> (f64, Gradients),
{
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        let mut acc = Gradients::default();
        for &k in chunk {
            let (loss, g) = sample_grad(store, k);
            total += loss;
            acc.accumulate(&g);
        }
        acc.scale(1.0 / chunk.len() as f32);
        opt.step(store, &acc);
    }
    total / n_items.max(1) as f64
}

pub fn train_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Binary foreground (any non-background label) crop.
pub fn foreground_crop(img: &SegmentedImage, r0: i64, c0: i64, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let sr = r0 + r as i64;
        if sr < 0 || sr >= img.height as i64 {
            continue;
        }
        for c in 0..w {
            let sc = c0 + c as i64;
            if sc >= 0
                && sc < img.width as i64
                && img.labels[sr as usize * img.width + sc as usize] != 0
            {
                out[r * w + c] = 1.0;
            }
        }
    }
    out
}

/// Foreground crop of `rotate_image(img, angle_deg, center)` without
/// rotating the whole image.
pub fn rotated_foreground_crop(
    img: &SegmentedImage,
    angle_deg: f64,
    center: (f64, f64),
    r0: i64,
    c0: i64,
    size: usize,
) -> Vec<f32> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = center;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let v = cy - ((r0 + r as i64) as f64 + 0.5);
        for col in 0..size {
            let u = (c0 + col as i64) as f64 + 0.5 - cx;
            let sx = (cx + c * u + s * v).floor();
            let sy = (cy - (-s * u + c * v)).floor();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < img.width && (sy as usize) < img.height {
                if img.labels[sy as usize * img.width + sx as usize] != 0 {
                    out[r * size + col] = 1.0;
                }
            }
        }
    }
    out
}

/// Mean (col, row) of foreground pixel centres.
pub fn foreground_centroid(img: &SegmentedImage) -> Option<(f64, f64)> {
    let (mut n, mut sc, mut sr) = (0usize, 0.0, 0.0);
    for r in 0..img.height {
        for c in 0..img.width {
            if img.labels[r * img.width + c] != 0 {
                n += 1;
                sc += c as f64 + 0.5;
                sr += r as f64 + 0.5;
            }
        }
    }
    (n > 0).then(|| (sc / n as f64, sr / n as f64))
}


/// Foreground pixels with a background 4-neighbour (or on the image edge).
pub fn foreground_outline(img: &SegmentedImage) -> SegmentedImage {
    let (w, h) = (img.width, img.height);
    let fg = |r: usize, c: usize| img.labels[r * w + c] != 0;
    let mut out = SegmentedImage::new(w, h);
    for r in 0..h {
        for c in 0..w {
            if fg(r, c)
                && (r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !fg(r - 1, c)
                    || !fg(r + 1, c)
                    || !fg(r, c - 1)
                    || !fg(r, c + 1))
            {
                out.labels[r * w + c] = 1;
            }
        }
    }
    out
}
