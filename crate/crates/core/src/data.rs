//! Video ingestion, preprocessing, train/validation split, and a synthetic
//! moving-sprites generator with ground truth.
//!
//! A video is either a directory of PNG/PGM/PPM frames (sorted by file
//! name) or a single `BVT1` tensor file of shape `[T,C,H,W]` whose values
//! are already normalized to `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use bivad_tensor::io::{load_tensor, save_tensor};
use bivad_tensor::Tensor;
use image::{DynamicImage, GrayImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SynthConfig;
use crate::error::{invalid, Error, Result};
use crate::metrics::{GroundTruth, Mask};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// A decoded frame before preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    /// 8-bit pixels, channel-major `[C,H,W]`.
    Pixels { channels: usize, height: usize, width: usize, data: Vec<u8> },
    /// Values already in `[-1, 1]`, `[C,H,W]`.
    Normalized(Tensor<f32>),
}

impl Frame {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Frame::Pixels { channels, height, width, .. } => (*channels, *height, *width),
            Frame::Normalized(t) => (t.shape()[0], t.shape()[1], t.shape()[2]),
        }
    }

    fn to_unit_range(&self) -> Tensor<f32> {
        match self {
            Frame::Pixels { channels, height, width, data } => {
                let v = data.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
                Tensor::new(&[*channels, *height, *width], v).expect("consistent frame")
            }
            Frame::Normalized(t) => t.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VideoSource {
    pub id: String,
    pub frames: Vec<Frame>,
    pub labels: Option<GroundTruth>,
}

fn decode_image(path: &Path) -> Result<Frame> {
    let img = image::open(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        return Ok(Frame::Pixels { channels: 1, height, width, data: img.to_luma8().into_raw() });
    }
    let rgb = img.to_rgb8().into_raw();
    let mut data = vec![0u8; rgb.len()];
    let plane = height * width;
    for (i, px) in rgb.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c];
        }
    }
    Ok(Frame::Pixels { channels: 3, height, width, data })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Loads a frame directory or a `BVT1` video file.
pub fn load_video(path: impl AsRef<Path>) -> Result<VideoSource> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| invalid!("cannot derive a video id from {}", path.display()))?
        .to_string();
    let frames = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        if files.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no image frames in {}", path.display()),
            )));
        }
        files.iter().map(|f| decode_image(f)).collect::<Result<Vec<_>>>()?
    } else {
        let t: Tensor<f32> = load_tensor(path)?;
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::Format(format!("video tensor must be [T,C,H,W], got {:?}", t.shape())));
        };
        (0..n)
            .map(|i| Ok(Frame::Normalized(t.narrow(0, i, 1)?.reshape(&[c, h, w])?)))
            .collect::<Result<Vec<_>>>()?
    };
    let dims = frames[0].dims();
    if let Some(bad) = frames.iter().find(|f| f.dims() != dims) {
        return Err(Error::Format(format!("{id}: frame of size {:?} among frames of size {dims:?}", bad.dims())));
    }
    Ok(VideoSource { id, frames, labels: None })
}

/// Bilinear resize of every channel plane with half-pixel centers.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let coord = |dst: usize, scale: f64, limit: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|y| coord(y, h as f64 / out_h as f64, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, w as f64 / out_w as f64, w)).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("consistent resize")
}

/// Maps a frame to `[-1, 1]`, resizes it to `size × size`, and matches the
/// channel count (color frames are averaged to gray when one channel is
/// wanted).
pub fn preprocess(frame: &Frame, size: usize, channels: usize) -> Result<Tensor<f32>> {
    let t = frame.to_unit_range();
    let c = t.shape()[0];
    let t = match (c, channels) {
        (a, b) if a == b => t,
        (3, 1) => {
            let plane = t.numel() / 3;
            let d = t.data();
            let gray = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).collect();
            Tensor::new(&[1, t.shape()[1], t.shape()[2]], gray)?
        }
        (1, 3) => Tensor::concat(&[&t, &t, &t], 0)?,
        (a, b) => return Err(Error::Format(format!("cannot convert {a}-channel frames to {b} channels"))),
    };
    Ok(resize_bilinear(&t, size, size))
}

/// Shuffles `items` with `seed` and moves `round(len * fraction)` of them
/// into the validation half.
pub fn split_train_val<X>(items: Vec<X>, fraction: f64, seed: u64) -> Result<(Vec<X>, Vec<X>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid!("validation fraction must lie in (0, 1), got {fraction}"));
    }
    let n_val = ((items.len() as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; items.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.into_iter().zip(is_val) {
        if v {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// The sprite suddenly moves several times faster.
    SpeedJump,
    /// The sprite jitters back and forth.
    DirectionReversal,
    /// The sprite is replaced by a larger, differently shaped object.
    NovelShape,
    /// The sprite leaves its horizontal lane and moves vertically.
    OffPath,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] =
        [AnomalyKind::SpeedJump, AnomalyKind::DirectionReversal, AnomalyKind::NovelShape, AnomalyKind::OffPath];
}

/// Frames `[start, end)` in which sprite `sprite` behaves abnormally.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnomalyWindow {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
    pub sprite: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub sprites: usize,
    pub sprite_size: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub length: usize,
    pub anomalies: Vec<AnomalyWindow>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sprites == 0 || self.sprite_size == 0 || self.sprite_size * 2 >= self.image_size {
            return Err(invalid!("sprites must be non-empty and smaller than half the frame"));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return Err(invalid!("need 0 < speed_min <= speed_max"));
        }
        for a in &self.anomalies {
            if a.start >= a.end || a.end > self.length || a.sprite >= self.sprites {
                return Err(invalid!("anomaly window {a:?} outside the video or sprite set"));
            }
        }
        Ok(())
    }
}

/// Generated grayscale video with per-frame labels and masks.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub size: usize,
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<bool>,
    pub masks: Vec<Vec<bool>>,
}

impl SynthVideo {
    pub fn ground_truth(&self) -> GroundTruth {
        let masks = self
            .masks
            .iter()
            .map(|m| Mask { height: self.size, width: self.size, data: m.clone() })
            .collect();
        let mut gt = GroundTruth { frame_labels: self.labels.clone(), region_masks: Some(masks), tracks: None };
        gt.link_tracks().expect("masks present");
        gt
    }

    pub fn to_source(&self, id: &str) -> VideoSource {
        let frames = self
            .frames
            .iter()
            .map(|f| Frame::Pixels { channels: 1, height: self.size, width: self.size, data: f.clone() })
            .collect();
        VideoSource { id: id.to_string(), frames, labels: Some(self.ground_truth()) }
    }
}

struct Sprite {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    brightness: f64,
}

/// Coverage of pixel `[p, p+1)` by the interval `[lo, hi)`.
fn coverage(p: usize, lo: f64, hi: f64) -> f64 {
    let (a, b) = (p as f64, p as f64 + 1.0);
    (hi.min(b) - lo.max(a)).max(0.0)
}

/// Area-antialiased square; returns the touched pixels.
fn draw_square(canvas: &mut [f64], size: usize, x: f64, y: f64, side: f64, value: f64) -> Vec<usize> {
    draw_rect(canvas, size, x, y, side, side, value)
}

/// Plus-shaped object centered in the box `[x, x+side)²`.
fn draw_cross(canvas: &mut [f64], size: usize, x: f64, y: f64, side: f64, value: f64) -> Vec<usize> {
    let bar = side / 3.0;
    let mut t = draw_rect(canvas, size, x, y + bar, side, bar, value);
    t.extend(draw_rect(canvas, size, x + bar, y, bar, side, value));
    t.sort_unstable();
    t.dedup();
    t
}

fn draw_rect(canvas: &mut [f64], size: usize, x: f64, y: f64, w: f64, h: f64, value: f64) -> Vec<usize> {
    let mut touched = Vec::new();
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x1, y1) = (((x + w).ceil() as usize).min(size), ((y + h).ceil() as usize).min(size));
    for py in y0..y1 {
        let cy = coverage(py, y, y + h);
        for px in x0..x1 {
            let a = cy * coverage(px, x, x + w);
            if a > 0.0 {
                let i = py * size + px;
                canvas[i] = canvas[i] * (1.0 - a) + value * a;
                if a > 0.25 {
                    touched.push(i);
                }
            }
        }
    }
    touched
}

/// Renders a synthetic video: squares moving along horizontal lanes with
/// constant velocity and wall bounces over a static textured background.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let side = spec.sprite_size as f64;
    let limit = (size - spec.sprite_size) as f64;

    let (fx, fy) = (rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2));
    let (px, py) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let background: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64, (i / size) as f64);
            60.0 + 18.0 * (x * fx + px).sin() * (y * fy + py).cos()
        })
        .collect();

    let lane = limit / spec.sprites as f64;
    let mut sprites: Vec<Sprite> = (0..spec.sprites)
        .map(|k| {
            let speed = rng.gen_range(spec.speed_min..=spec.speed_max);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            Sprite {
                x: rng.gen_range(0.0..limit),
                y: lane * k as f64 + rng.gen_range(0.0..lane.max(1e-9)),
                vx: speed * dir,
                vy: rng.gen_range(-0.1..0.1),
                brightness: rng.gen_range(175.0..235.0),
            }
        })
        .collect();

    let mut video = SynthVideo {
        size,
        frames: Vec::with_capacity(spec.length),
        labels: Vec::with_capacity(spec.length),
        masks: Vec::with_capacity(spec.length),
    };
    for t in 0..spec.length {
        let mut canvas = background.clone();
        let mut mask = vec![false; size * size];
        for (k, s) in sprites.iter().enumerate() {
            let active = spec.anomalies.iter().find(|a| a.sprite == k && (a.start..a.end).contains(&t));
            let touched = match active.map(|a| a.kind) {
                Some(AnomalyKind::NovelShape) => {
                    let big = side * 1.75;
                    let (cx, cy) = ((s.x - (big - side) / 2.0).clamp(0.0, size as f64 - big), (s.y - (big - side) / 2.0).clamp(0.0, size as f64 - big));
                    draw_cross(&mut canvas, size, cx, cy, big, 120.0)
                }
                _ => draw_square(&mut canvas, size, s.x, s.y, side, s.brightness),
            };
            if active.is_some() {
                for i in touched {
                    mask[i] = true;
                }
            }
        }
        video.labels.push(mask.iter().any(|&m| m));
        video.masks.push(mask);
        video.frames.push(canvas.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect());

        for (k, s) in sprites.iter_mut().enumerate() {
            let active = spec.anomalies.iter().find(|a| a.sprite == k && (a.start..a.end).contains(&(t + 1)));
            let (dx, dy) = match active {
                Some(a) => match a.kind {
                    AnomalyKind::SpeedJump => (s.vx * 4.0, s.vy),
                    AnomalyKind::DirectionReversal => {
                        let phase = ((t + 1 - a.start) / 2) % 2;
                        let sign = if phase == 0 { 1.0 } else { -1.0 };
                        (sign * 2.5 * s.vx.signum(), s.vy)
                    }
                    AnomalyKind::NovelShape => (s.vx, s.vy),
                    AnomalyKind::OffPath => (0.0, 2.5 * if s.y < limit / 2.0 { 1.0 } else { -1.0 }),
                },
                None => (s.vx, s.vy),
            };
            s.x += dx;
            s.y += dy;
            if s.x < 0.0 || s.x > limit {
                s.vx = -s.vx;
                s.x = s.x.clamp(0.0, limit);
            }
            if s.y < 0.0 || s.y > limit {
                s.vy = -s.vy;
                s.y = s.y.clamp(0.0, limit);
            }
        }
    }
    Ok(video)
}

/// Non-overlapping anomaly windows inside the scored part of a video.
pub fn plan_anomalies<R: Rng + ?Sized>(
    count: usize,
    window: usize,
    length: usize,
    margin: usize,
    sprites: usize,
    first_kind: usize,
    rng: &mut R,
) -> Vec<AnomalyWindow> {
    let usable = length.saturating_sub(2 * margin);
    if count == 0 || window == 0 || usable < count * window {
        return Vec::new();
    }
    let slot = usable / count;
    (0..count)
        .map(|i| {
            let slack = slot - window.min(slot);
            let start = margin + i * slot + rng.gen_range(0..=slack);
            AnomalyWindow {
                kind: AnomalyKind::ALL[(first_kind + i) % AnomalyKind::ALL.len()],
                start,
                end: start + window,
                sprite: rng.gen_range(0..sprites),
            }
        })
        .collect()
}

/// Writes frames as `000000.png`, `000001.png`, ... into `dir`.
pub fn write_frames(dir: &Path, video: &SynthVideo) -> Result<()> {
    fs::create_dir_all(dir)?;
    let side = video.size as u32;
    for (i, f) in video.frames.iter().enumerate() {
        let img = GrayImage::from_raw(side, side, f.clone()).ok_or_else(|| invalid!("frame buffer size"))?;
        img.save(dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

/// Writes `<id>_gt.bvt` (`[T]`) and `<id>_masks.bvt` (`[T,1,H,W]`).
pub fn write_ground_truth(dir: &Path, id: &str, video: &SynthVideo) -> Result<()> {
    let t = video.labels.len();
    let labels = Tensor::new(&[t], video.labels.iter().map(|&l| if l { 1.0f32 } else { 0.0 }).collect())?;
    save_tensor(dir.join(format!("{id}_gt.bvt")), &labels)?;
    let masks: Vec<f32> = video.masks.iter().flatten().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    save_tensor(dir.join(format!("{id}_masks.bvt")), &Tensor::new(&[t, 1, video.size, video.size], masks)?)?;
    Ok(())
}

/// Loads `<id>_gt.bvt` and, when present, `<id>_masks.bvt` next to a test
/// video. Tracks are linked from the masks.
pub fn load_ground_truth(dir: &Path, id: &str) -> Result<Option<GroundTruth>> {
    let gt_path = dir.join(format!("{id}_gt.bvt"));
    if !gt_path.exists() {
        return Ok(None);
    }
    let labels: Tensor<f32> = load_tensor(&gt_path)?;
    if labels.rank() != 1 {
        return Err(Error::Format(format!("{}: labels must be [T]", gt_path.display())));
    }
    let frame_labels: Vec<bool> = labels.data().iter().map(|&v| v > 0.5).collect();
    let mask_path = dir.join(format!("{id}_masks.bvt"));
    let region_masks = if mask_path.exists() {
        let m: Tensor<f32> = load_tensor(&mask_path)?;
        let &[t, _, h, w] = m.shape() else {
            return Err(Error::Format(format!("{}: masks must be [T,1,H,W]", mask_path.display())));
        };
        if t != frame_labels.len() {
            return Err(Error::Format(format!("{id}: {t} masks for {} labels", frame_labels.len())));
        }
        let plane = m.numel() / t;
        Some(
            (0..t)
                .map(|i| Mask {
                    height: h,
                    width: w,
                    data: m.data()[i * plane..i * plane + h * w].iter().map(|&v| v > 0.5).collect(),
                })
                .collect(),
        )
    } else {
        None
    };
    let mut gt = GroundTruth { frame_labels, region_masks, tracks: None };
    if gt.region_masks.is_some() {
        gt.link_tracks()?;
    }
    Ok(Some(gt))
}

/// Video entries of a split directory: subdirectories and `.bvt` files
/// other than ground-truth files, sorted by name.
pub fn list_videos(split_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(split_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            p.is_dir()
                || (name.ends_with(".bvt") && !name.ends_with("_gt.bvt") && !name.ends_with("_masks.bvt"))
        })
        .collect();
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Loads every video of `<root>/<split>`, attaching ground truth when found.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<VideoSource>> {
    let dir = root.join(split);
    list_videos(&dir)?
        .iter()
        .map(|p| {
            let mut v = load_video(p)?;
            v.labels = load_ground_truth(&dir, &v.id)?;
            if let Some(gt) = &v.labels {
                if gt.frame_labels.len() != v.frames.len() {
                    return Err(Error::Format(format!(
                        "{}: {} labels for {} frames",
                        v.id,
                        gt.frame_labels.len(),
                        v.frames.len()
                    )));
                }
            }
            Ok(v)
        })
        .collect()
}

/// Writes a full synthetic dataset: normal training videos and test videos
/// with injected anomalies. `margin` keeps anomalies inside scored frames.
pub fn synth_dataset(cfg: &SynthConfig, root: &Path, seed: u64, margin: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = |length: usize, anomalies: Vec<AnomalyWindow>, seed: u64| SynthSpec {
        image_size: cfg.image_size,
        sprites: cfg.sprites,
        sprite_size: cfg.sprite_size,
        speed_min: cfg.speed_min,
        speed_max: cfg.speed_max,
        length,
        anomalies,
        seed,
    };
    for i in 0..cfg.train_videos {
        let v = synth_generate(&spec(cfg.train_length, Vec::new(), rng.gen()))?;
        write_frames(&root.join("train").join(format!("{i:03}")), &v)?;
    }
    let test_dir = root.join("test");
    for i in 0..cfg.test_videos {
        let windows = plan_anomalies(
            cfg.anomalies_per_video,
            cfg.anomaly_length,
            cfg.test_length,
            margin,
            cfg.sprites,
            i,
            &mut rng,
        );
        let v = synth_generate(&spec(cfg.test_length, windows, rng.gen()))?;
        let id = format!("{i:03}");
        write_frames(&test_dir.join(&id), &v)?;
        write_ground_truth(&test_dir, &id, &v)?;
    }
    Ok(())
}
