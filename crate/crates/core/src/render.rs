//! Orthographic top-down rasteriser for the peg/seam label image.

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfnError};
use crate::geometry::{transform, Vec2};
use crate::shapes::ShapeSpec;
use crate::sim::Pose;

pub const BACKGROUND: u8 = 0;
pub const PEG: u8 = 1;
pub const SEAM: u8 = 2;

/// Grey levels used when label images are written to disk.
pub const LABEL_GREY: [u8; 3] = [0, 127, 255];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub px_per_mm: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Hole centre in continuous pixel coordinates `(col, row)`; pixel
    /// `(r, c)` covers `[c, c+1) × [r, r+1)`.
    pub principal_point: (f64, f64),
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::with_scale(2.0)
    }
}

impl CameraModel {
    pub fn with_scale(px_per_mm: f64) -> Self {
        Self {
            px_per_mm,
            image_width: 250,
            image_height: 200,
            principal_point: (125.0, 100.0),
        }
    }

    /// World millimetres (y up) to continuous pixel coordinates `(col, row)`.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        (
            self.principal_point.0 + p.x * self.px_per_mm,
            self.principal_point.1 - p.y * self.px_per_mm,
        )
    }

    pub fn unproject(&self, col: f64, row: f64) -> Vec2 {
        Vec2::new(
            (col - self.principal_point.0) / self.px_per_mm,
            (self.principal_point.1 - row) / self.px_per_mm,
        )
    }
}

/// Rounds a world displacement to whole pixels along the world axes.
pub fn world_to_pixel(camera: &CameraModel, dx: f64, dy: f64) -> (i64, i64) {
    (
        (dx * camera.px_per_mm).round() as i64,
        (dy * camera.px_per_mm).round() as i64,
    )
}

pub fn pixel_to_world(camera: &CameraModel, di: i64, dj: i64) -> (f64, f64) {
    (di as f64 / camera.px_per_mm, dj as f64 / camera.px_per_mm)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentedImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl SegmentedImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![BACKGROUND; width * height],
        }
    }

    pub fn for_camera(camera: &CameraModel) -> Self {
        Self::new(camera.image_width, camera.image_height)
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Row/column bounding box `(r0, c0, r1, c1)` (exclusive ends) of
    /// non-background pixels.
    pub fn foreground_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) != BACKGROUND {
                    bb = Some(match bb {
                        None => (r, c, r + 1, c + 1),
                        Some((r0, c0, r1, c1)) => {
                            (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1))
                        }
                    });
                }
            }
        }
        bb
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let grey: Vec<u8> = self
            .labels
            .iter()
            .map(|&l| LABEL_GREY[l as usize])
            .collect();
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &grey,
        )
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, ct, data) = read_png(path)?;
        if ct != png::ColorType::Grayscale {
            return Err(SfnError::Input(format!(
                "{} is not greyscale",
                path.display()
            )));
        }
        let labels = data
            .iter()
            .map(|&g| {
                LABEL_GREY
                    .iter()
                    .position(|&v| v == g)
                    .map(|l| l as u8)
                    .ok_or_else(|| SfnError::Input(format!("grey level {g} is not a label")))
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self {
            width: w,
            height: h,
            labels,
        })
    }
}

pub(crate) fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

pub(crate) fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut reader = png::Decoder::new(file).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((
        info.width as usize,
        info.height as usize,
        info.color_type,
        buf,
    ))
}

/// Calls `visit(row, col)` for every pixel whose centre lies inside the
/// polygon (even-odd rule). Vertices are continuous `(col, row)` coordinates.
pub fn fill_polygon(
    poly: &[(f64, f64)],
    width: usize,
    height: usize,
    mut visit: impl FnMut(usize, usize),
) {
    if poly.len() < 3 {
        return;
    }
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, y) in poly {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let r0 = (ymin - 0.5).ceil().max(0.0) as usize;
    let r1 = ((ymax - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    let n = poly.len();
    let mut xs: Vec<f64> = Vec::new();
    for r in r0..r1 {
        let yc = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.1 > yc) != (b.1 > yc) {
                xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            // Columns whose centre c + 0.5 lies in (x0, x1).
            let c0 = (pair[0] - 0.5).floor() + 1.0;
            let c1 = (pair[1] - 0.5).ceil() - 1.0;
            let c0 = c0.max(0.0) as i64;
            let c1 = c1.min(width as f64 - 1.0) as i64;
            for c in c0..=c1 {
                visit(r, c as usize);
            }
        }
    }
}

fn project_all(camera: &CameraModel, poly: &[Vec2]) -> Vec<(f64, f64)> {
    poly.iter().map(|p| camera.project(*p)).collect()
}

/// Label image for the peg at `pose` over the hole at the origin: peg pixels
/// first, then seam = hole opening not covered by the peg.
pub fn render_seg(shape: &ShapeSpec, pose: &Pose, camera: &CameraModel) -> Result<SegmentedImage> {
    let mut img = SegmentedImage::for_camera(camera);
    let (w, h) = (img.width, img.height);
    let peg = transform(&shape.peg_polygon, pose.x, pose.y, pose.theta);
    let mut peg_px = 0usize;
    fill_polygon(&project_all(camera, &peg), w, h, |r, c| {
        img.labels[r * w + c] = PEG;
        peg_px += 1;
    });
    if peg_px == 0 {
        return Err(SfnError::Domain(format!(
            "peg at ({:.2}, {:.2}) is outside the field of view",
            pose.x, pose.y
        )));
    }
    fill_polygon(&project_all(camera, &shape.hole_polygon), w, h, |r, c| {
        let l = &mut img.labels[r * w + c];
        if *l == BACKGROUND {
            *l = SEAM;
        }
    });
    Ok(img)
}

/// Peg-only and seam-only images.
pub fn split_channels(image: &SegmentedImage) -> (SegmentedImage, SegmentedImage) {
    let keep = |want: u8| SegmentedImage {
        width: image.width,
        height: image.height,
        labels: image
            .labels
            .iter()
            .map(|&l| if l == want { l } else { BACKGROUND })
            .collect(),
    };
    (keep(PEG), keep(SEAM))
}

/// Nearest-neighbour rotation by `angle_deg` (counter-clockwise as seen in
/// the world frame) about `center = (col, row)`. Pixels mapping outside the
/// source become background.
pub fn rotate_image(image: &SegmentedImage, angle_deg: f64, center: (f64, f64)) -> SegmentedImage {
    let mut out = SegmentedImage::new(image.width, image.height);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = center;
    for r in 0..image.height {
        let v = cy - (r as f64 + 0.5);
        for col in 0..image.width {
            let u = col as f64 + 0.5 - cx;
            // Inverse rotation in the y-up frame.
            let su = c * u + s * v;
            let sv = -s * u + c * v;
            let sx = (cx + su).floor();
            let sy = (cy - sv).floor();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < image.width && (sy as usize) < image.height
            {
                out.labels[r * image.width + col] = image.get(sy as usize, sx as usize);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::shape_by_id;

    #[test]
    fn world_pixel_examples() {
        let cam = CameraModel::default();
        assert_eq!(world_to_pixel(&cam, 0.0, 0.0), (0, 0));
        assert_eq!(world_to_pixel(&cam, 3.0, -2.0), (6, -4));
        let (x, y) = pixel_to_world(&cam, 7, -3);
        assert_eq!((x, y), (3.5, -1.5));
    }

    #[test]
    fn fill_unit_square_px() {
        let mut hits = Vec::new();
        fill_polygon(
            &[(1.0, 1.0), (3.0, 1.0), (3.0, 3.0), (1.0, 3.0)],
            5,
            5,
            |r, c| hits.push((r, c)),
        );
        assert_eq!(hits, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn aligned_square_has_thin_ring() {
        let cam = CameraModel::default();
        let shape = shape_by_id("square", 0.5).unwrap();
        let img = render_seg(&shape, &Pose::default(), &cam).unwrap();
        assert_eq!(img.count(PEG), 40 * 40);
        // One pixel ring around the 40×40 peg, corners included.
        assert_eq!(img.count(SEAM), 42 * 42 - 40 * 40);
    }

    #[test]
    fn out_of_view_is_domain_error() {
        let cam = CameraModel::default();
        let shape = shape_by_id("square", 0.5).unwrap();
        let pose = Pose {
            x: 500.0,
            ..Pose::default()
        };
        assert!(matches!(
            render_seg(&shape, &pose, &cam),
            Err(SfnError::Domain(_))
        ));
    }

    #[test]
    fn rotate_quarter_turn_moves_pixel_ccw() {
        let mut img = SegmentedImage::new(10, 10);
        img.set(5, 8, SEAM); // right of centre
        let rot = rotate_image(&img, 90.0, (5.0, 5.0));
        // Counter-clockwise in the y-up frame sends "right" to "up".
        assert_eq!(rot.get(1, 5), SEAM);
        assert_eq!(rot.count(SEAM), 1);
    }

    #[test]
    fn png_roundtrip() {
        let cam = CameraModel::default();
        let shape = shape_by_id("hexagon", 1.0).unwrap();
        let img = render_seg(
            &shape,
            &Pose {
                x: 2.0,
                y: -1.0,
                theta: 5.0,
                z: 0.0,
            },
            &cam,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        img.save_png(&path).unwrap();
        assert_eq!(SegmentedImage::load_png(&path).unwrap(), img);
    }
}
