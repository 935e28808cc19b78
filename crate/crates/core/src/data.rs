//! Image samples, the synthetic shapes corpus, CIFAR binary ingestion and
//! RandomResizedCrop augmentation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Name of the high-level task: dominant shape type.
pub const TASK_CLASS: &str = "class";
/// Name of the counting task: number of shapes.
pub const TASK_COUNT: &str = "count";
/// Name of the size task: bin of the largest shape's size.
pub const TASK_DIST: &str = "dist";

pub const SHAPE_KINDS: usize = 4;
pub const MAX_SHAPES: usize = 6;
pub const DIST_BINS: usize = 4;

/// `height x width x channels` image, channel-last, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// A square RGB image with values in `[0, 1]` and one integer label per task.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub labels: BTreeMap<String, usize>,
}

impl ImageSample {
    pub fn new(image: Image, labels: BTreeMap<String, usize>) -> Result<Self> {
        if image.height() != image.width() || image.channels() != CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "samples must be square RGB, got {}x{}x{}",
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { image, labels })
    }

    pub fn size(&self) -> usize {
        self.image.height()
    }

    pub fn label(&self, task: &str) -> Option<usize> {
        self.labels.get(task).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { seed: u64, count: usize },
    CifarBinary { path: PathBuf },
}

/// Where samples come from and what they look like.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub image_size: usize,
    pub task_names: Vec<String>,
}

impl DatasetSpec {
    pub fn synthetic(seed: u64, count: usize, image_size: usize) -> Self {
        Self {
            source: DataSource::Synthetic { seed, count },
            image_size,
            task_names: vec![TASK_CLASS.into(), TASK_COUNT.into(), TASK_DIST.into()],
        }
    }

    pub fn cifar(path: impl Into<PathBuf>) -> Self {
        Self {
            source: DataSource::CifarBinary { path: path.into() },
            image_size: 32,
            task_names: vec![TASK_CLASS.into()],
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if patch_size == 0 || !self.image_size.is_multiple_of(patch_size) {
            return Err(Error::config(
                "image_size",
                format!(
                    "{} is not divisible by patch_size {patch_size}",
                    self.image_size
                ),
            ));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<ImageSample>> {
        let samples = match &self.source {
            DataSource::Synthetic { seed, count } => {
                generate_synthetic_shapes(*seed, *count, self.image_size)?
            }
            DataSource::CifarBinary { path } => load_cifar_binary(path)?,
        };
        if let Some(s) = samples.first() {
            if s.size() != self.image_size {
                return Err(Error::ConfigMismatch(format!(
                    "dataset yields {}px images but {}px were configured",
                    s.size(),
                    self.image_size
                )));
            }
        }
        Ok(samples)
    }

    /// Plain-text manifest header describing a synthetic set.
    pub fn manifest(&self) -> String {
        let tasks = self.task_names.join(",");
        match &self.source {
            DataSource::Synthetic { seed, count } => format!(
                "# synthetic-shapes\nseed={seed}\ncount={count}\nsize={}\ntasks={tasks}\n",
                self.image_size
            ),
            DataSource::CifarBinary { path } => format!(
                "# cifar-binary\npath={}\nsize={}\ntasks={tasks}\n",
                path.display(),
                self.image_size
            ),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source {
            DataSource::Synthetic { seed, count } => {
                write!(f, "synth:seed={seed},count={count},size={}", self.image_size)
            }
            DataSource::CifarBinary { path } => write!(f, "cifar:{}", path.display()),
        }
    }
}

/// Parses `synth:seed=7,count=2000[,size=32]` or `cifar:PATH`.
impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::config("data", msg);
        if let Some(rest) = s.strip_prefix("cifar:") {
            if rest.is_empty() {
                return Err(bad("cifar source needs a path".into()));
            }
            return Ok(DatasetSpec::cifar(rest));
        }
        let rest = s
            .strip_prefix("synth:")
            .or_else(|| s.strip_prefix("synthetic:"))
            .ok_or_else(|| bad(format!("unknown data source `{s}`")))?;
        let (mut seed, mut count, mut size) = (0u64, None, 32usize);
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{kv}`")))?;
            let parse_err = |_| bad(format!("`{k}` expects an integer, got `{v}`"));
            match k.trim() {
                "seed" => seed = v.trim().parse().map_err(parse_err)?,
                "count" => count = Some(v.trim().parse().map_err(parse_err)?),
                "size" => size = v.trim().parse().map_err(parse_err)?,
                other => return Err(bad(format!("unknown synthetic key `{other}`"))),
            }
        }
        let count = count.ok_or_else(|| bad("synthetic source needs count=".into()))?;
        Ok(DatasetSpec::synthetic(seed, count, size))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    fn from_index(i: usize) -> Self {
        match i {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Cross,
        }
    }

    /// Whether offset `(dy, dx)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            // apex up, base at dy = +r
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
            ShapeKind::Cross => {
                let arm = r * 0.35;
                (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
            }
        }
    }
}

struct Placed {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
}

/// Radius bounds of the largest shape for size bin `bin`, scaled to `size`.
fn dist_bin_range(bin: usize, size: usize) -> (f64, f64) {
    let unit = size as f64 / 32.0;
    let lo = 2.5 + 1.5 * bin as f64;
    ((lo) * unit, (lo + 1.5) * unit)
}

/// Renders a deterministic set of synthetic images.
///
/// Labels are drawn first so that every task is roughly balanced:
/// `class` is the strict-majority shape kind (the largest shape is always of
/// that kind), `count` the number of shapes
/// (1 to 6), and `dist` the bin of the largest shape's radius.
pub fn generate_synthetic_shapes(
    seed: u64,
    count: usize,
    image_size: usize,
) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be at least 16, got {image_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| render_one(&mut rng, image_size))
        .collect()
}

fn render_one(rng: &mut ChaCha8Rng, size: usize) -> Result<ImageSample> {
    let class = rng.gen_range(0..SHAPE_KINDS);
    let n_shapes = rng.gen_range(1..=MAX_SHAPES);
    let dist = rng.gen_range(0..DIST_BINS);

    let majority = n_shapes / 2 + 1;
    let mut kinds: Vec<ShapeKind> = (0..n_shapes)
        .map(|i| {
            if i < majority {
                ShapeKind::from_index(class)
            } else {
                let other = (class + rng.gen_range(1..SHAPE_KINDS)) % SHAPE_KINDS;
                ShapeKind::from_index(other)
            }
        })
        .collect();
    // the first (largest) shape is always of the majority kind; the rest are shuffled
    for i in (2..kinds.len()).rev() {
        let j = rng.gen_range(1..=i);
        kinds.swap(i, j);
    }

    let (r_lo, r_hi) = dist_bin_range(dist, size);
    let largest = rng.gen_range(r_lo..r_hi);
    let min_r = 1.5 * size as f64 / 32.0;
    let mut placed: Vec<Placed> = Vec::with_capacity(n_shapes);
    for (i, kind) in kinds.into_iter().enumerate() {
        let radius = if i == 0 {
            largest
        } else {
            rng.gen_range(min_r..largest.max(min_r + 1e-3)).min(largest)
        };
        let margin = radius + 0.5;
        let span = (size as f64 - 2.0 * margin).max(0.0);
        // rejection sampling for low overlap; the last attempt is kept regardless
        let mut centre = (0.0, 0.0);
        for _ in 0..20 {
            centre = (margin + rng.gen::<f64>() * span, margin + rng.gen::<f64>() * span);
            let clear = placed.iter().all(|p| {
                let d = ((p.cy - centre.0).powi(2) + (p.cx - centre.1).powi(2)).sqrt();
                d > (p.radius + radius) * 0.9
            });
            if clear {
                break;
            }
        }
        let color = bright_color(rng);
        placed.push(Placed {
            kind,
            cy: centre.0,
            cx: centre.1,
            radius,
            color,
        });
    }

    let mut image = textured_background(rng, size);
    for p in &placed {
        let y0 = (p.cy - p.radius).floor().max(0.0) as usize;
        let y1 = ((p.cy + p.radius).ceil() as usize).min(size - 1);
        let x0 = (p.cx - p.radius).floor().max(0.0) as usize;
        let x1 = ((p.cx + p.radius).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 + 0.5 - p.cy;
                let dx = x as f64 + 0.5 - p.cx;
                if p.kind.contains(dy, dx, p.radius) {
                    for c in 0..CHANNELS {
                        image.set(y, x, c, p.color[c]);
                    }
                }
            }
        }
    }

    let mut labels = BTreeMap::new();
    labels.insert(TASK_CLASS.to_string(), class);
    labels.insert(TASK_COUNT.to_string(), n_shapes);
    labels.insert(TASK_DIST.to_string(), dist);
    ImageSample::new(image, labels)
}

fn bright_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    let strong = rng.gen_range(0..3);
    for (i, v) in c.iter_mut().enumerate() {
        *v = if i == strong {
            rng.gen_range(0.75..1.0)
        } else {
            rng.gen_range(0.0..0.6)
        };
    }
    c
}

fn textured_background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let base: [f64; 3] = [
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
        rng.gen_range(0.05..0.35),
    ];
    let freq = rng.gen_range(0.2..0.9);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let amp = rng.gen_range(0.02..0.08);
    let mut img = Image::zeros(size, size, CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let stripe = amp * ((x as f64 * c + y as f64 * s) * freq).sin();
            for ch in 0..CHANNELS {
                let noise = rng.gen_range(-0.03..0.03);
                img.set(y, x, ch, (base[ch] + stripe + noise).clamp(0.0, 1.0));
            }
        }
    }
    img
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CHANNELS;

/// Loads a CIFAR-10 (1 label byte) or CIFAR-100 (coarse + fine label bytes)
/// binary batch. The record layout is inferred from the file length; CIFAR-100
/// files report the fine label under `class` and the coarse one under
/// `coarse_class`.
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes)
}

pub fn parse_cifar_records(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    let label_bytes = if !bytes.is_empty() && bytes.len().is_multiple_of(CIFAR_PIXELS + 1) {
        1
    } else if !bytes.is_empty() && bytes.len().is_multiple_of(CIFAR_PIXELS + 2) {
        2
    } else {
        return Err(Error::MalformedRecord(format!(
            "length {} is not a multiple of {} or {}",
            bytes.len(),
            CIFAR_PIXELS + 1,
            CIFAR_PIXELS + 2
        )));
    };
    let record = CIFAR_PIXELS + label_bytes;
    bytes
        .chunks_exact(record)
        .map(|rec| {
            let mut labels = BTreeMap::new();
            if label_bytes == 1 {
                labels.insert(TASK_CLASS.to_string(), rec[0] as usize);
            } else {
                labels.insert("coarse_class".to_string(), rec[0] as usize);
                labels.insert(TASK_CLASS.to_string(), rec[1] as usize);
            }
            let px = &rec[label_bytes..];
            let plane = CIFAR_SIDE * CIFAR_SIDE;
            let mut img = Image::zeros(CIFAR_SIDE, CIFAR_SIDE, CHANNELS);
            // channel-major on disk: all red, then green, then blue
            for c in 0..CHANNELS {
                for i in 0..plane {
                    img.set(i / CIFAR_SIDE, i % CIFAR_SIDE, c, px[c * plane + i] as f64 / 255.0);
                }
            }
            ImageSample::new(img, labels)
        })
        .collect()
}

/// Parameters of RandomResizedCrop (plus optional horizontal flip).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub out_size: usize,
    pub hflip: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale_lo: 0.2,
            scale_hi: 1.0,
            ratio_lo: 3.0 / 4.0,
            ratio_hi: 4.0 / 3.0,
            out_size: 32,
            hflip: false,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi <= 1.0) {
            return Err(Error::config(
                "crop.scale_lo",
                format!(
                    "need 0 < scale_lo <= scale_hi <= 1, got ({}, {})",
                    self.scale_lo, self.scale_hi
                ),
            ));
        }
        if !(self.ratio_lo > 0.0 && self.ratio_lo <= self.ratio_hi) {
            return Err(Error::config(
                "crop.ratio_lo",
                "need 0 < ratio_lo <= ratio_hi",
            ));
        }
        if self.out_size == 0 {
            return Err(Error::config("crop.out_size", "must be positive"));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

pub fn sample_crop_rect(src_h: usize, src_w: usize, rng: &mut impl Rng, cfg: &CropConfig) -> CropRect {
    let area = (src_h * src_w) as f64;
    for _ in 0..10 {
        let target = area * sample_closed(rng, cfg.scale_lo, cfg.scale_hi);
        let ratio = sample_closed(rng, cfg.ratio_lo, cfg.ratio_hi);
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= src_w && h <= src_h {
            let top = rng.gen_range(0..=src_h - h);
            let left = rng.gen_range(0..=src_w - w);
            return CropRect {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    // fall back to the largest centred crop within the ratio bounds
    let in_ratio = src_w as f64 / src_h as f64;
    let (h, w) = if in_ratio < cfg.ratio_lo {
        let w = src_w;
        (((w as f64 / cfg.ratio_lo).round() as usize).min(src_h), w)
    } else if in_ratio > cfg.ratio_hi {
        let h = src_h;
        (h, ((h as f64 * cfg.ratio_hi).round() as usize).min(src_w))
    } else {
        (src_h, src_w)
    };
    CropRect {
        top: (src_h - h) / 2,
        left: (src_w - w) / 2,
        height: h,
        width: w,
    }
}

fn sample_closed(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Bilinear resize of `rect` from `src` to `out_size x out_size`
/// (half-pixel centres, edge clamped).
pub fn resize_crop(src: &Image, rect: CropRect, out_size: usize) -> Image {
    let c = src.channels();
    let mut out = Image::zeros(out_size, out_size, c);
    let sy = rect.height as f64 / out_size as f64;
    let sx = rect.width as f64 / out_size as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let p = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (p.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f64)
    };
    for y in 0..out_size {
        let (y0, y1, fy) = axis(y, sy, rect.height);
        for x in 0..out_size {
            let (x0, x1, fx) = axis(x, sx, rect.width);
            for ch in 0..c {
                let v00 = src.get(rect.top + y0, rect.left + x0, ch);
                let v01 = src.get(rect.top + y0, rect.left + x1, ch);
                let v10 = src.get(rect.top + y1, rect.left + x0, ch);
                let v11 = src.get(rect.top + y1, rect.left + x1, ch);
                let v = if fy == 0.0 && fx == 0.0 {
                    v00
                } else {
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    top + (bot - top) * fy
                };
                out.set(y, x, ch, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// RandomResizedCrop: area fraction uniform in `[scale_lo, scale_hi]`, aspect
/// ratio uniform in `[ratio_lo, ratio_hi]`, bilinear resize to `out_size`.
/// Labels pass through untouched.
pub fn augment_random_resized_crop(
    sample: &ImageSample,
    rng: &mut impl Rng,
    cfg: &CropConfig,
) -> ImageSample {
    let rect = sample_crop_rect(sample.image.height(), sample.image.width(), rng, cfg);
    let mut image = resize_crop(&sample.image, rect, cfg.out_size);
    if cfg.hflip && rng.gen_bool(0.5) {
        let (h, w, c) = (image.height(), image.width(), image.channels());
        for y in 0..h {
            for x in 0..w / 2 {
                for ch in 0..c {
                    let a = image.get(y, x, ch);
                    let b = image.get(y, w - 1 - x, ch);
                    image.set(y, x, ch, b);
                    image.set(y, w - 1 - x, ch, a);
                }
            }
        }
    }
    ImageSample {
        image,
        labels: sample.labels.clone(),
    }
}
