//! Automatic data collection: random poses, rendered masks, synthetic RGB
//! frames and ground-truth displacements.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SfnError};
use crate::render::{
    read_png, render_seg, rotate_image, split_channels, write_png, CameraModel, SegmentedImage,
};
use crate::shapes::{shape_by_id, Family, ShapeSpec};
use crate::sim::Pose;

pub const DATASET_VERSION: u32 = 1;
pub const BANK_SIZE: usize = 11;
pub const BANK_CENTER: usize = 5;
pub const BANK_STEP_DEG: f64 = 2.0;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Rgb,
            &self.data,
        )
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (width, height, ct, data) = read_png(path)?;
        if ct != png::ColorType::Rgb {
            return Err(SfnError::Input(format!("{} is not RGB", path.display())));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}

/// Correction that aligns the peg in one step: the negated pose error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Displacement {
    pub fn from_pose(p: &Pose) -> Self {
        Self {
            dx: -p.x,
            dy: -p.y,
            dtheta: -p.theta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub rgb: RgbImage,
    pub mask: SegmentedImage,
    pub displacement: Displacement,
    pub shape_id: String,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRanges {
    pub pos_mm: f64,
    pub ori_deg: f64,
}

impl Default for ErrorRanges {
    fn default() -> Self {
        Self {
            pos_mm: 10.0,
            ori_deg: 10.0,
        }
    }
}

pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, ranges: ErrorRanges) -> Pose {
    let p = ranges.pos_mm;
    let o = ranges.ori_deg;
    Pose::planar(
        rng.random_range(-p..=p),
        rng.random_range(-p..=p),
        rng.random_range(-o..=o),
    )
}

/// Flat class colours: background, peg, seam.
pub const PALETTE: [[f32; 3]; 3] = [
    [150.0, 150.0, 140.0],
    [200.0, 120.0, 60.0],
    [40.0, 40.0, 55.0],
];
/// Sensor noise present in every synthetic frame (8-bit levels).
pub const BASE_NOISE_STD: f32 = 4.0;

fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Flat-coloured frame with mild sensor noise.
pub fn synth_rgb(mask: &SegmentedImage, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, BASE_NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(mask.labels.len() * 3);
    for &l in &mask.labels {
        for ch in PALETTE[l as usize] {
            data.push(to_u8(ch + noise.sample(&mut rng)));
        }
    }
    RgbImage {
        width: mask.width,
        height: mask.height,
        data,
    }
}

/// Brightness jitter, Gaussian pixel noise and a hue rotation, all scaled by
/// `severity` ∈ [0, 1]. Severity 0 returns the input unchanged.
pub fn add_domain_noise(rgb: &RgbImage, severity: f64, seed: u64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SfnError::Range(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    if severity == 0.0 {
        return Ok(rgb.clone());
    }
    let s = severity as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = rng.random_range(-40.0f32..=40.0) * s;
    let hue = rng.random_range(-0.3f32..=0.3) * s;
    let noise = Normal::new(0.0f32, 20.0 * s).expect("valid std");
    // Rotation about the grey axis in RGB space.
    let (sn, cs) = hue.sin_cos();
    let k = 1.0 / 3.0f32;
    let sq = k.sqrt();
    let m = [
        [
            cs + (1.0 - cs) * k,
            k * (1.0 - cs) - sq * sn,
            k * (1.0 - cs) + sq * sn,
        ],
        [
            k * (1.0 - cs) + sq * sn,
            cs + k * (1.0 - cs),
            k * (1.0 - cs) - sq * sn,
        ],
        [
            k * (1.0 - cs) - sq * sn,
            k * (1.0 - cs) + sq * sn,
            cs + k * (1.0 - cs),
        ],
    ];
    let mut data = Vec::with_capacity(rgb.data.len());
    for px in rgb.data.chunks(3) {
        let v = [px[0] as f32, px[1] as f32, px[2] as f32];
        for row in &m {
            let c = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            data.push(to_u8(c + brightness + noise.sample(&mut rng)));
        }
    }
    Ok(RgbImage {
        width: rgb.width,
        height: rgb.height,
        data,
    })
}

/// Well-mixed 64-bit seed derived from a base seed and a stream of indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z
            .wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Renders one labelled sample at `pose`.
pub fn make_sample(
    shape: &ShapeSpec,
    pose: Pose,
    camera: &CameraModel,
    noise: f64,
    seed: u64,
) -> Result<LabeledSample> {
    let mask = render_seg(shape, &pose, camera)?;
    let rgb = add_domain_noise(&synth_rgb(&mask, seed), noise, seed ^ 0xA5A5)?;
    Ok(LabeledSample {
        rgb,
        mask,
        displacement: Displacement::from_pose(&pose),
        shape_id: shape.id.clone(),
        pose,
    })
}

/// Quantises an orientation error to its bank bin: nearest 2° step with ties
/// toward zero, clipped to the bank.
pub fn orientation_index(theta_err: f64) -> usize {
    let q = theta_err / BANK_STEP_DEG;
    let r = if (q - q.trunc()).abs() == 0.5 {
        q.trunc()
    } else {
        q.round()
    };
    (BANK_CENTER as f64 + r).clamp(0.0, (BANK_SIZE - 1) as f64) as usize
}

/// Rotation applied to the seam image for bank entry `i`.
pub fn bank_angle(i: usize) -> f64 {
    (i as f64 - BANK_CENTER as f64) * BANK_STEP_DEG
}

/// Peg image, the 11 rotated seam images and the index of the bank entry
/// whose hole orientation matches the peg.
pub fn make_orientation_batch(
    sample: &LabeledSample,
    camera: &CameraModel,
) -> (SegmentedImage, Vec<SegmentedImage>, usize) {
    let (ip, is) = split_channels(&sample.mask);
    let bank = (0..BANK_SIZE)
        .map(|i| rotate_image(&is, bank_angle(i), camera.principal_point))
        .collect();
    (ip, bank, orientation_index(sample.pose.theta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seen shapes split 4:1 into train/val by sample index; unseen shapes are
/// always test.
pub fn split_for(family: Family, index: usize) -> Split {
    match family {
        Family::Unseen => Split::Test,
        Family::Seen if index % 5 == 4 => Split::Val,
        Family::Seen => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub shape_id: String,
    pub family: Family,
    pub split: Split,
    pub clearance: f64,
    pub pose: Pose,
    pub displacement: Displacement,
    pub mask_file: String,
    pub rgb_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub count_per_shape: usize,
    pub families: Vec<Family>,
    pub ranges: ErrorRanges,
    pub noise: f64,
    pub camera: CameraModel,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the serialised manifest.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Err(SfnError::MissingArtifact(path));
        }
        let m: Self = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if m.format_version != DATASET_VERSION {
            return Err(SfnError::Input(format!(
                "dataset version {} unsupported",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GenerateConfig {
    pub count: usize,
    pub ranges: ErrorRanges,
    pub seed: u64,
    pub noise: f64,
    pub camera: CameraModel,
}

/// Pose and sample seed for sample `i` of shape number `s`.
pub fn sample_plan(seed: u64, s: usize, i: usize, ranges: ErrorRanges) -> (Pose, u64) {
    let sample_seed = derive_seed(seed, &[s as u64, i as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    (sample_pose(&mut rng, ranges), sample_seed)
}

/// Generates `count` samples per shape in memory.
pub fn generate_samples(shapes: &[ShapeSpec], cfg: &GenerateConfig) -> Result<Vec<LabeledSample>> {
    check_generate(shapes, cfg)?;
    let mut out = Vec::with_capacity(shapes.len() * cfg.count);
    for (s, shape) in shapes.iter().enumerate() {
        for i in 0..cfg.count {
            let (pose, seed) = sample_plan(cfg.seed, s, i, cfg.ranges);
            out.push(make_sample(shape, pose, &cfg.camera, cfg.noise, seed)?);
        }
    }
    Ok(out)
}

fn check_generate(shapes: &[ShapeSpec], cfg: &GenerateConfig) -> Result<()> {
    if cfg.count == 0 {
        return Err(SfnError::Generation("count must be at least 1".into()));
    }
    if shapes.is_empty() {
        return Err(SfnError::Generation("no shapes given".into()));
    }
    Ok(())
}

/// Writes mask and RGB PNGs plus `manifest.json` into `out`. Files written
/// by a failed run are removed.
pub fn generate_dataset(
    shapes: &[ShapeSpec],
    cfg: &GenerateConfig,
    out: &Path,
) -> Result<DatasetManifest> {
    check_generate(shapes, cfg)?;
    std::fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(shapes, cfg, out, &mut written);
    if result.is_err() {
        for f in &written {
            let _ = std::fs::remove_file(f);
        }
    }
    result
}

fn write_dataset(
    shapes: &[ShapeSpec],
    cfg: &GenerateConfig,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    let mut families = Vec::new();
    for (s, shape) in shapes.iter().enumerate() {
        if !families.contains(&shape.family) {
            families.push(shape.family);
        }
        for i in 0..cfg.count {
            let (pose, seed) = sample_plan(cfg.seed, s, i, cfg.ranges);
            let sample = make_sample(shape, pose, &cfg.camera, cfg.noise, seed)
                .map_err(|e| SfnError::Generation(e.to_string()))?;
            let stem = format!("{}_{:05}", shape.id, i);
            let mask_file = format!("{stem}_mask.png");
            let rgb_file = format!("{stem}_rgb.png");
            written.push(out.join(&mask_file));
            sample.mask.save_png(&out.join(&mask_file))?;
            written.push(out.join(&rgb_file));
            sample.rgb.save_png(&out.join(&rgb_file))?;
            samples.push(SampleRecord {
                index: i,
                shape_id: shape.id.clone(),
                family: shape.family,
                split: split_for(shape.family, i),
                clearance: shape.clearance,
                pose,
                displacement: sample.displacement,
                mask_file,
                rgb_file,
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed: cfg.seed,
        count_per_shape: cfg.count,
        families,
        ranges: cfg.ranges,
        noise: cfg.noise,
        camera: cfg.camera,
        samples,
    };
    let path = out.join(DatasetManifest::FILE);
    written.push(path.clone());
    std::fs::write(&path, manifest.to_json()?)?;
    Ok(manifest)
}

/// Reads the samples of one split back from disk.
pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<LabeledSample>> {
    manifest
        .records(split)
        .map(|r| {
            Ok(LabeledSample {
                rgb: RgbImage::load_png(&dir.join(&r.rgb_file))?,
                mask: SegmentedImage::load_png(&dir.join(&r.mask_file))?,
                displacement: r.displacement,
                shape_id: r.shape_id.clone(),
                pose: r.pose,
            })
        })
        .collect()
}

/// Re-renders the mask of a record; used to verify label exactness.
pub fn rerender(record: &SampleRecord, camera: &CameraModel) -> Result<SegmentedImage> {
    let shape = shape_by_id(&record.shape_id, record.clearance)?;
    render_seg(&shape, &record.pose, camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{BACKGROUND, PEG, SEAM};
    use crate::shapes::shape_by_id;

    fn cfg(count: usize) -> GenerateConfig {
        GenerateConfig {
            count,
            ranges: ErrorRanges::default(),
            seed: 11,
            noise: 0.5,
            camera: CameraModel::default(),
        }
    }

    #[test]
    fn orientation_index_examples() {
        assert_eq!(orientation_index(0.0), 5);
        assert_eq!(orientation_index(4.0), 7);
        assert_eq!(orientation_index(-10.0), 0);
        assert_eq!(orientation_index(3.0), 6);
        assert_eq!(orientation_index(-3.0), 4);
        assert_eq!(orientation_index(1.0), 5);
        assert_eq!(orientation_index(-1.0), 5);
        assert_eq!(orientation_index(25.0), 10);
    }

    #[test]
    fn noise_severity_zero_is_identity_and_seeded() {
        let mask = render_seg(
            &shape_by_id("square", 1.0).unwrap(),
            &Pose::planar(1.0, 2.0, 3.0),
            &CameraModel::default(),
        )
        .unwrap();
        let rgb = synth_rgb(&mask, 3);
        assert_eq!(add_domain_noise(&rgb, 0.0, 9).unwrap(), rgb);
        let a = add_domain_noise(&rgb, 1.0, 9).unwrap();
        let b = add_domain_noise(&rgb, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, rgb);
        assert!(add_domain_noise(&rgb, 1.5, 9).is_err());
    }

    #[test]
    fn synthetic_colours_follow_labels() {
        let mask = render_seg(
            &shape_by_id("hexagon", 1.0).unwrap(),
            &Pose::planar(4.0, 0.0, 0.0),
            &CameraModel::default(),
        )
        .unwrap();
        let rgb = synth_rgb(&mask, 1);
        for (i, &l) in mask.labels.iter().enumerate().step_by(97) {
            let px = rgb.pixel(i / mask.width, i % mask.width);
            let ref_c = PALETTE[l as usize];
            for c in 0..3 {
                assert!((px[c] as f32 - ref_c[c]).abs() < 6.0 * BASE_NOISE_STD);
            }
        }
        assert!(mask.count(PEG) > 0 && mask.count(SEAM) > 0 && mask.count(BACKGROUND) > 0);
    }

    #[test]
    fn count_zero_and_no_shapes_fail() {
        let sq = shape_by_id("square", 1.0).unwrap();
        assert!(generate_samples(&[sq], &cfg(0)).is_err());
        assert!(generate_samples(&[], &cfg(3)).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_hash_stability() {
        let shapes = vec![
            shape_by_id("square", 1.0).unwrap(),
            shape_by_id("cross", 1.0).unwrap(),
        ];
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&shapes, &cfg(5), d1.path()).unwrap();
        let m2 = generate_dataset(&shapes, &cfg(5), d2.path()).unwrap();
        assert_eq!(m1.hash().unwrap(), m2.hash().unwrap());
        assert_eq!(m1.samples.len(), 10);
        let loaded = DatasetManifest::load(d1.path()).unwrap();
        assert_eq!(loaded, m1);
        let train = load_split(d1.path(), &m1, Split::Train).unwrap();
        assert_eq!(train.len(), 4);
        let test = load_split(d1.path(), &m1, Split::Test).unwrap();
        assert!(test.iter().all(|s| s.shape_id == "cross"));
        for r in &m1.samples {
            let mask = SegmentedImage::load_png(&d1.path().join(&r.mask_file)).unwrap();
            assert_eq!(mask, rerender(r, &m1.camera).unwrap());
        }
    }

    #[test]
    fn failed_generation_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(20);
        // Ranges this large push the peg out of view for some samples.
        c.ranges = ErrorRanges {
            pos_mm: 70.0,
            ori_deg: 10.0,
        };
        let shapes = vec![shape_by_id("square", 1.0).unwrap()];
        let renders = |seed: u64, i: usize| {
            make_sample(
                &shapes[0],
                sample_plan(seed, 0, i, c.ranges).0,
                &c.camera,
                0.0,
                0,
            )
            .is_ok()
        };
        // A seed whose first sample renders and a later one does not.
        c.seed = (0..100)
            .find(|&s| renders(s, 0) && (1..20).any(|i| !renders(s, i)))
            .expect("suitable seed");
        assert!(matches!(
            generate_dataset(&shapes, &c, dir.path()),
            Err(SfnError::Generation(_))
        ));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn orientation_bank_layout() {
        let shape = shape_by_id("square", 1.0).unwrap();
        let cam = CameraModel::default();
        let s = make_sample(&shape, Pose::planar(2.0, -3.0, 4.0), &cam, 0.0, 1).unwrap();
        let (ip, bank, pos) = make_orientation_batch(&s, &cam);
        assert_eq!(pos, 7);
        assert_eq!(bank.len(), BANK_SIZE);
        let (_, is) = split_channels(&s.mask);
        assert_eq!(bank[BANK_CENTER], is);
        assert_eq!(ip.count(PEG), s.mask.count(PEG));
        assert!(bank.iter().all(|b| b.count(PEG) == 0));
    }
}
