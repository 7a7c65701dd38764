//! Procedural video of a single articulated figure, top-down cropping, and
//! Gaussian ground-truth heatmaps.
//!
//! Coordinates are continuous pixel positions with pixel `i` centred at `i`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrameTriplet, Heatmap, ModelConfig, Sample};
use crate::tensor::Tensor;

/// Box enlargement applied around a detected person.
pub const BOX_EXPANSION: f64 = 1.25;
/// Ground-truth Gaussian width, in heatmap pixels.
pub const HEATMAP_SIGMA: f64 = 2.0;

/// Parents of the 15-joint body used by default: pelvis, neck, head, then
/// left/right arms and legs.
pub const BODY_SKELETON: [Option<usize>; 15] = [
    None,
    Some(0),
    Some(1),
    Some(1),
    Some(3),
    Some(4),
    Some(1),
    Some(6),
    Some(7),
    Some(0),
    Some(9),
    Some(10),
    Some(0),
    Some(12),
    Some(13),
];

// Rest-pose bone directions (radians, image y down) and relative lengths for
// the body skeleton.
const BODY_BONES: [(f64, f64); 15] = [
    (0.0, 0.0),
    (-PI / 2.0, 1.0),
    (-PI / 2.0, 0.35),
    (PI, 0.35),
    (PI * 0.65, 0.55),
    (PI * 0.6, 0.5),
    (0.0, 0.35),
    (PI * 0.35, 0.55),
    (PI * 0.4, 0.5),
    (PI * 0.6, 0.25),
    (PI / 2.0, 0.75),
    (PI / 2.0, 0.7),
    (PI * 0.4, 0.25),
    (PI / 2.0, 0.75),
    (PI / 2.0, 0.7),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub seed: u64,
    pub joints: usize,
    /// Parent of each joint; the root (joint 0) has none.
    pub skeleton: Vec<Option<usize>>,
    /// Peak drift speed in pixels per frame.
    pub amplitude: f64,
    pub image_height: usize,
    pub image_width: usize,
}

impl SynthScene {
    /// Body skeleton for 15 joints, a simple chain otherwise.
    pub fn new(seed: u64, joints: usize) -> Self {
        let skeleton = if joints == BODY_SKELETON.len() {
            BODY_SKELETON.to_vec()
        } else {
            (0..joints).map(|j| j.checked_sub(1)).collect()
        };
        Self {
            seed,
            joints,
            skeleton,
            amplitude: 2.0,
            image_height: 256,
            image_width: 192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.skeleton.len() != self.joints {
            return Err(Error::Argument(format!(
                "scene: {} joints but {} skeleton entries",
                self.joints,
                self.skeleton.len()
            )));
        }
        if self.skeleton[0].is_some() {
            return Err(Error::Argument("scene: joint 0 must be the root".into()));
        }
        for (j, p) in self.skeleton.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::Argument(format!(
                        "scene: joint {j} needs a parent with a lower index"
                    )))
                }
            }
        }
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Argument("scene: image must be at least 16x16".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Argument("scene: amplitude must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One rendered frame: `H×W×3` image in `[0, 1]` and `(x, y)` keypoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFrame {
    #[serde(skip)]
    pub image: Option<Tensor>,
    pub keypoints: Vec<[f64; 2]>,
}

struct Figure {
    root: [f64; 2],
    bones: Vec<(f64, f64)>,
    swing_phase: Vec<f64>,
    drift_phase: [f64; 2],
    colors: Vec<[f64; 3]>,
}

const DRIFT_FREQ: f64 = 0.2;
const SWING_FREQ: f64 = 0.35;
/// Limb swing in radians per pixel-per-frame of amplitude.
const SWING_PER_AMPLITUDE: f64 = 0.04;

impl Figure {
    fn new(scene: &SynthScene) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let body = scene.joints == BODY_SKELETON.len() && scene.skeleton == BODY_SKELETON;
        let mut bones: Vec<(f64, f64)> = (0..scene.joints)
            .map(|j| {
                let (angle, len) = if body {
                    BODY_BONES[j]
                } else if j == 0 {
                    (0.0, 0.0)
                } else {
                    (rng.random_range(-PI..PI), 1.0)
                };
                let jitter = rng.random_range(-0.15..0.15);
                (angle + jitter, len * rng.random_range(0.85..1.15))
            })
            .collect();

        // Scale so every joint stays within 30% of the short side from the root.
        let mut reach = vec![0.0f64; scene.joints];
        for j in 1..scene.joints {
            reach[j] = reach[scene.skeleton[j].unwrap()] + bones[j].1;
        }
        let max_reach = reach.iter().cloned().fold(0.0, f64::max);
        let short = scene.image_height.min(scene.image_width) as f64;
        let scale = if max_reach > 0.0 { 0.3 * short / max_reach } else { 0.0 };
        for b in &mut bones {
            b.1 *= scale;
        }
        let jitter = 0.05 * short;
        let root = [
            (scene.image_width as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
            (scene.image_height as f64 - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
        ];
        let swing_phase = (0..scene.joints).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let drift_phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let colors = (0..scene.joints)
            .map(|j| {
                let hue = j as f64 / scene.joints as f64 * 2.0 * PI;
                [
                    0.55 + 0.45 * hue.cos(),
                    0.55 + 0.45 * (hue + 2.0 * PI / 3.0).cos(),
                    0.55 + 0.45 * (hue + 4.0 * PI / 3.0).cos(),
                ]
            })
            .collect();
        Self {
            root,
            bones,
            swing_phase,
            drift_phase,
            colors,
        }
    }

    fn keypoints(&self, scene: &SynthScene, t: usize) -> Vec<[f64; 2]> {
        let t = t as f64;
        let excursion = scene.amplitude / DRIFT_FREQ;
        let root = [
            self.root[0] + excursion * (DRIFT_FREQ * t + self.drift_phase[0]).sin()
                - excursion * self.drift_phase[0].sin(),
            self.root[1] + 0.5 * excursion * (DRIFT_FREQ * t + self.drift_phase[1]).sin()
                - 0.5 * excursion * self.drift_phase[1].sin(),
        ];
        let swing = SWING_PER_AMPLITUDE * scene.amplitude;
        let mut pts = vec![root; scene.joints];
        let mut angles = vec![0.0; scene.joints];
        for j in 1..scene.joints {
            let parent = scene.skeleton[j].unwrap();
            let (angle, len) = self.bones[j];
            let a = angle
                + swing * ((SWING_FREQ * t + self.swing_phase[j]).sin() - self.swing_phase[j].sin());
            angles[j] = a;
            pts[j] = [pts[parent][0] + len * a.cos(), pts[parent][1] + len * a.sin()];
        }
        pts
    }
}

fn render(scene: &SynthScene, fig: &Figure, pts: &[[f64; 2]]) -> Tensor {
    let (h, w) = (scene.image_height, scene.image_width);
    let short = h.min(w) as f64;
    let mut img = vec![0.0; h * w * 3];
    // faint vertical gradient background
    for y in 0..h {
        let v = 0.05 + 0.1 * y as f64 / h as f64;
        for x in 0..w {
            let o = (y * w + x) * 3;
            img[o] = v;
            img[o + 1] = v;
            img[o + 2] = v;
        }
    }
    let mut paint = |cx0: f64, cy0: f64, cx1: f64, cy1: f64, radius: f64, color: [f64; 3]| {
        let x_lo = (cx0.min(cx1) - radius).floor().max(0.0) as usize;
        let y_lo = (cy0.min(cy1) - radius).floor().max(0.0) as usize;
        let x_hi = ((cx0.max(cx1) + radius).ceil().max(0.0) as usize).min(w - 1);
        let y_hi = ((cy0.max(cy1) + radius).ceil().max(0.0) as usize).min(h - 1);
        let (dx, dy) = (cx1 - cx0, cy1 - cy0);
        let len2 = dx * dx + dy * dy;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (px, py) = (x as f64 - cx0, y as f64 - cy0);
                let s = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ex, ey) = (px - s * dx, py - s * dy);
                if ex * ex + ey * ey <= radius * radius {
                    let o = (y * w + x) * 3;
                    img[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    };
    for (j, p) in scene.skeleton.iter().enumerate() {
        if let Some(p) = *p {
            let c = fig.colors[j];
            paint(pts[p][0], pts[p][1], pts[j][0], pts[j][1], 0.015 * short, [c[0] * 0.6, c[1] * 0.6, c[2] * 0.6]);
        }
    }
    for (j, pt) in pts.iter().enumerate() {
        paint(pt[0], pt[1], pt[0], pt[1], 0.025 * short, fig.colors[j]);
    }
    Tensor::new(vec![h, w, 3], img).expect("image shape")
}

/// Renders `length` consecutive frames of the scene's figure.
pub fn generate_sequence(scene: &SynthScene, length: usize) -> Result<Vec<SynthFrame>> {
    scene.validate()?;
    if length < 3 {
        return Err(Error::Argument(format!("sequence length must be >= 3, got {length}")));
    }
    let fig = Figure::new(scene);
    Ok((0..length)
        .map(|t| {
            let keypoints = fig.keypoints(scene, t);
            SynthFrame {
                image: Some(render(scene, &fig, &keypoints)),
                keypoints,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::Argument(format!("invalid box ({x}, {y}, {w}, {h})")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Tight box around the points, padded by `pad` pixels on every side.
    pub fn around(points: &[[f64; 2]], pad: f64) -> Result<Self> {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        Self::new(x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad)
    }

    /// Scaled about its centre by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let (cx, cy) = (self.x + self.w / 2.0, self.y + self.h / 2.0);
        let (w, h) = (self.w * factor, self.h * factor);
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// Intersection with the `width×height` image rectangle.
    pub fn clamped(&self, width: usize, height: usize) -> Result<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Argument(format!(
                "box {self:?} does not intersect the {width}x{height} image"
            )));
        }
        Ok(Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// The person region actually cropped: enlarged by 25%, then clamped.
    pub fn expanded(&self, width: usize, height: usize) -> Result<Self> {
        self.scaled(BOX_EXPANSION).clamped(width, height)
    }

    /// Maps an image point into an `out_w×out_h` resampling of this region.
    pub fn to_crop(&self, p: [f64; 2], out_w: usize, out_h: usize) -> [f64; 2] {
        let sx = self.w / out_w as f64;
        let sy = self.h / out_h as f64;
        [(p[0] + 0.5 - self.x) / sx - 0.5, (p[1] + 0.5 - self.y) / sy - 0.5]
    }
}

fn sample_bilinear(img: &Tensor, x: f64, y: f64, out: &mut [f64]) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = img.data();
    for (ch, o) in out.iter_mut().enumerate() {
        let at = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + ch];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Resamples `region` of an image to `out_h×out_w`.
pub fn crop_resize(img: &Tensor, region: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::shape("crop_resize", img.shape(), &[0, 0, 3]));
    }
    let sx = region.w / out_w as f64;
    let sy = region.h / out_h as f64;
    let mut data = vec![0.0; out_h * out_w * 3];
    for oy in 0..out_h {
        let y = region.y + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = region.x + (ox as f64 + 0.5) * sx - 0.5;
            let o = (oy * out_w + ox) * 3;
            sample_bilinear(img, x, y, &mut data[o..o + 3]);
        }
    }
    Tensor::new(vec![out_h, out_w, 3], data)
}

/// Enlarges the key frame's person box by 25%, clamps it to the image, and
/// crops the same region from all three frames at the model input size.
pub fn expand_and_crop(
    bbox: &BoundingBox,
    frames: [&Tensor; 3],
    out_h: usize,
    out_w: usize,
) -> Result<(FrameTriplet, BoundingBox)> {
    let (h, w) = match frames[0].shape() {
        &[h, w, 3] => (h, w),
        other => return Err(Error::shape("expand_and_crop", other, &[0, 0, 3])),
    };
    let region = bbox.expanded(w, h)?;
    let crops = [
        crop_resize(frames[0], &region, out_h, out_w)?,
        crop_resize(frames[1], &region, out_h, out_w)?,
        crop_resize(frames[2], &region, out_h, out_w)?,
    ];
    Ok((FrameTriplet::new(crops, 0, 0)?, region))
}

/// One Gaussian per joint, peak 1 at the rounded keypoint position.
/// Keypoints are `(x, y)` in heatmap pixels; joints off the map give zeros.
pub fn render_gaussian_heatmaps(keypoints: &[[f64; 2]], height: usize, width: usize, sigma: f64) -> Result<Heatmap> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Argument(format!("sigma must be > 0, got {sigma}")));
    }
    if keypoints.is_empty() || height == 0 || width == 0 {
        return Err(Error::Argument("heatmap needs joints and a positive size".into()));
    }
    let mut maps = vec![0.0; keypoints.len() * height * width];
    for (j, kp) in keypoints.iter().enumerate() {
        let (cx, cy) = (kp[0].round(), kp[1].round());
        if !(cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64) {
            continue;
        }
        let map = &mut maps[j * height * width..(j + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                map[y * width + x] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Heatmap::new(Tensor::new(vec![keypoints.len(), height, width], maps)?)
}

/// Input-crop coordinates to heatmap coordinates for a downsampling stride.
pub fn to_heatmap_coords(p: [f64; 2], stride: f64) -> [f64; 2] {
    [(p[0] + 0.5) / stride - 0.5, (p[1] + 0.5) / stride - 0.5]
}

/// A training example from frames `t-1, t, t+1` of a scene: the key frame's
/// person box is expanded and cropped from all three frames, and the key
/// frame's keypoints become Gaussian targets.
pub fn make_sample(scene: &SynthScene, t: usize, cfg: &ModelConfig) -> Result<Sample> {
    if t == 0 {
        return Err(Error::Argument("key frame needs a predecessor".into()));
    }
    if scene.joints != cfg.joints {
        return Err(Error::Argument(format!(
            "scene has {} joints, model expects {}",
            scene.joints, cfg.joints
        )));
    }
    let seq = generate_sequence(scene, (t + 2).max(3))?;
    let images: Vec<&Tensor> = seq[t - 1..=t + 1].iter().map(|f| f.image.as_ref().unwrap()).collect();
    let short = scene.image_height.min(scene.image_width) as f64;
    let bbox = BoundingBox::around(&seq[t].keypoints, 0.04 * short)?;
    let (mut triplet, region) = expand_and_crop(
        &bbox,
        [images[0], images[1], images[2]],
        cfg.image_height,
        cfg.image_width,
    )?;
    triplet.person_id = scene.seed as usize;
    triplet.frame_index = t;
    let (hh, hw) = cfg.hr_grid();
    let stride = cfg.image_height as f64 / hh as f64;
    let kps: Vec<[f64; 2]> = seq[t]
        .keypoints
        .iter()
        .map(|&p| to_heatmap_coords(region.to_crop(p, cfg.image_width, cfg.image_height), stride))
        .collect();
    let target = render_gaussian_heatmaps(&kps, hh, hw, HEATMAP_SIGMA)?;
    Ok(Sample { triplet, target })
}

/// `size` samples from consecutive seeds starting at `seed`.
pub fn synthetic_batch(cfg: &ModelConfig, seed: u64, size: usize) -> Result<Vec<Sample>> {
    (0..size as u64)
        .map(|i| make_sample(&SynthScene::new(seed + i, cfg.joints), 1, cfg))
        .collect()
}

/// Writes a binary (P5) grayscale image: the channel mean scaled to 0..255.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        &[h, w, 3] => (h, w),
        other => return Err(Error::shape("write_pgm", other, &[0, 0, 3])),
    };
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(img.data().chunks_exact(3).map(|px| {
        let v = (px.iter().sum::<f64>() / 3.0).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    }));
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    scene: &'a SynthScene,
    frames: Vec<SidecarFrame>,
}

#[derive(Serialize)]
struct SidecarFrame {
    image: String,
    keypoints: Vec<[f64; 2]>,
}

/// Writes `frame_XXXX.pgm` files plus `keypoints.json` into `dir`.
pub fn dump_sequence(dir: &Path, scene: &SynthScene, frames: &[SynthFrame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut side = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.pgm");
        if let Some(img) = &f.image {
            write_pgm(&dir.join(&name), img)?;
        }
        side.push(SidecarFrame {
            image: name,
            keypoints: f.keypoints.clone(),
        });
    }
    let sidecar = Sidecar {
        format: "ftpose-synth/1",
        scene,
        frames: side,
    };
    std::fs::write(dir.join("keypoints.json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}
