//! Procedural scenes with aligned image, segmentation, depth and normal labels.
//!
//! A scene is a tilted background plane plus axis-aligned rectangles and
//! circles floating in front of it. The camera is orthographic, so depth is the
//! plane height read straight off each pixel. Each foreground class has its own
//! colour family and brightness falls off with depth, which leaves every label
//! recoverable from the image while keeping depth independent of class.

use std::io::{self, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tasks::{LabelMap, TaskKind, TaskSpec};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("segmentation task expects {expected} classes but the scenes have {got}")]
    ClassCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("write failed: {0}")]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Including background class 0.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            num_classes: 5,
            min_shapes: 3,
            max_shapes: 5,
            z_min: 1.0,
            z_max: 2.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DataError::Config(msg));
        if self.height < 2 || self.width < 2 {
            return fail(format!("image must be at least 2x2, got {}x{}", self.height, self.width));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_classes > u32::MAX as usize {
            return fail(format!("too many classes: {}", self.num_classes));
        }
        if self.min_shapes > self.max_shapes {
            return fail(format!("shape range {}..={} is empty", self.min_shapes, self.max_shapes));
        }
        if !(self.z_min > 0.0 && self.z_min < self.z_max && self.z_max.is_finite()) {
            return fail(format!("depth range [{}, {}] must satisfy 0 < z_min < z_max", self.z_min, self.z_max));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise std must be finite and non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    /// Additionally require both image sides to be divisible by `divisor`.
    pub fn validate_for(&self, divisor: usize) -> Result<()> {
        self.validate()?;
        if self.height % divisor != 0 || self.width % divisor != 0 {
            return Err(DataError::Config(format!(
                "image {}x{} not divisible by {divisor}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn span(&self) -> f64 {
        self.z_max - self.z_min
    }
}

/// Depth `z = base + slope_x * (x - cx) + slope_y * (y - cy)` in pixel units,
/// measured from the image (or shape) centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub base: f64,
    pub slope_x: f64,
    pub slope_y: f64,
}

impl Plane {
    fn at(&self, x: f64, y: f64, cx: f64, cy: f64) -> f64 {
        self.base + self.slope_x * (x - cx) + self.slope_y * (y - cy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outline {
    /// Pixel columns `x0..x1` and rows `y0..y1`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    /// Pixels whose centres lie within `radius` of `(cx, cy)`.
    Circle { cx: f64, cy: f64, radius: f64 },
}

impl Outline {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Outline::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Outline::Circle { cx, cy, radius } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= radius * radius
            }
        }
    }

    fn centre(&self) -> (f64, f64) {
        match *self {
            Outline::Rect { x0, y0, x1, y1 } => ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0),
            Outline::Circle { cx, cy, .. } => (cx, cy),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub outline: Outline,
    pub class: u32,
    /// Depth plane centred on the shape.
    pub depth: Plane,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub background: Plane,
    pub background_color: [f64; 3],
    pub shapes: Vec<Shape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Class id per pixel, row-major.
    pub seg: Vec<u32>,
    /// `[1, H, W]`.
    pub depth: Tensor,
    /// `[3, H, W]` unit vectors.
    pub normals: Tensor,
}

const BACKGROUND_COLOR: [f64; 3] = [0.55, 0.55, 0.55];
const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.85, 0.25],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.2, 0.85, 0.9],
];
const COLOR_JITTER: f64 = 0.06;
/// Brightness lost between the nearest and the farthest depth.
const DEPTH_FADE: f64 = 0.5;

/// Base colour of a class; classes beyond the palette get evenly spaced hues.
pub fn class_color(class: u32) -> [f64; 3] {
    if class == 0 {
        return BACKGROUND_COLOR;
    }
    let i = class as usize - 1;
    if i < PALETTE.len() {
        return PALETTE[i];
    }
    let hue = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.75 * r, 0.15 + 0.75 * g, 0.15 + 0.75 * b]
}

fn sample_rng(config: &SceneConfig, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    rng
}

fn jittered(base: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

/// Draw a scene layout. The background lives in the far half of the depth range
/// and every shape in the near half, so shapes always sit in front of it.
pub fn generate_layout(config: &SceneConfig, rng: &mut impl Rng) -> Layout {
    let (h, w) = (config.height as f64, config.width as f64);
    let span = config.span();

    // Total tilt across the image stays within +-0.2 span.
    let background = Plane {
        base: config.z_min + span * rng.random_range(0.72..=0.78),
        slope_x: span * rng.random_range(-0.2..=0.2) / w,
        slope_y: span * rng.random_range(-0.2..=0.2) / h,
    };

    let count = rng.random_range(config.min_shapes..=config.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let outline = if rng.random_bool(0.5) {
            let rw = size_in(config.width, rng);
            let rh = size_in(config.height, rng);
            let x0 = rng.random_range(0..=config.width - rw);
            let y0 = rng.random_range(0..=config.height - rh);
            Outline::Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            }
        } else {
            let max_r = h.min(w) / 4.0;
            let radius = rng.random_range(max_r / 2.0..=max_r).max(0.5);
            Outline::Circle {
                cx: rng.random_range(radius..=w - radius),
                cy: rng.random_range(radius..=h - radius),
                radius,
            }
        };
        let class = rng.random_range(1..config.num_classes as u32);
        // Offsets from the centre are at most one image extent, so the total
        // change stays within +-0.1 span.
        let depth = Plane {
            base: config.z_min + span * rng.random_range(0.1..=0.35),
            slope_x: span * rng.random_range(-0.05..=0.05) / w,
            slope_y: span * rng.random_range(-0.05..=0.05) / h,
        };
        let color = jittered(class_color(class), rng);
        shapes.push(Shape {
            outline,
            class,
            depth,
            color,
        });
    }
    let background_color = jittered(BACKGROUND_COLOR, rng);
    Layout {
        background,
        background_color,
        shapes,
    }
}

/// Side length between a sixth and a half of `extent`, at least one pixel.
fn size_in(extent: usize, rng: &mut impl Rng) -> usize {
    let lo = (extent / 6).max(1);
    let hi = (extent / 2).max(lo);
    rng.random_range(lo..=hi)
}

/// Rasterize a layout. Overlaps resolve to the nearest surface; the image adds
/// Gaussian noise from `rng` and is clipped to `[0, 1]`.
pub fn render(config: &SceneConfig, layout: &Layout, rng: &mut impl Rng) -> Result<Sample> {
    let (h, w) = (config.height, config.width);
    let hw = h * w;
    let (icx, icy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut seg = vec![0u32; hw];
    let mut depth = vec![0.0; hw];
    let mut color = vec![[0.0; 3]; hw];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * w + x;
            let mut best = (
                layout.background.at(px, py, icx, icy),
                0u32,
                layout.background_color,
            );
            for shape in &layout.shapes {
                if !shape.outline.contains(x, y) {
                    continue;
                }
                let (scx, scy) = shape.outline.centre();
                let z = shape.depth.at(px, py, scx, scy);
                if z < best.0 {
                    best = (z, shape.class, shape.color);
                }
            }
            depth[i] = best.0.clamp(config.z_min, config.z_max);
            seg[i] = best.1;
            color[i] = best.2;
        }
    }

    let noise = Normal::new(0.0, config.noise_std).map_err(|e| DataError::Config(e.to_string()))?;
    let mut image = vec![0.0; 3 * hw];
    for c in 0..3 {
        for i in 0..hw {
            let shade = 1.0 - DEPTH_FADE * (depth[i] - config.z_min) / config.span();
            image[c * hw + i] = (color[i][c] * shade + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }

    let depth = Tensor::new(vec![1, h, w], depth)?;
    let normals = depth_to_normals(&depth)?;
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], image)?,
        seg,
        depth,
        normals,
    })
}

/// Sample `index` of the scene family described by `config`.
pub fn generate_sample(config: &SceneConfig, index: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = sample_rng(config, index);
    let layout = generate_layout(config, &mut rng);
    render(config, &layout, &mut rng)
}

/// Surface normals `normalize(-dz/dx, -dz/dy, 1)` of a `[1, H, W]` depth map,
/// with central differences inside and one-sided ones on the border.
pub fn depth_to_normals(depth: &Tensor) -> Result<Tensor> {
    let dims = depth.dims();
    let (h, w) = match *dims {
        [1, h, w] if h >= 2 && w >= 2 => (h, w),
        _ => {
            return Err(DataError::Config(format!(
                "depth map must be [1, H, W] with H, W >= 2, got {}",
                depth.shape()
            )))
        }
    };
    let z = depth.data();
    let hw = h * w;
    // Neighbour pair around `at` along an axis of length `n`, one-sided at the ends.
    let around = |at: usize, n: usize| (at.saturating_sub(1), (at + 1).min(n - 1));
    let mut out = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = around(x, w);
            let (y0, y1) = around(y, h);
            let dzdx = (z[y * w + x1] - z[y * w + x0]) / (x1 - x0) as f64;
            let dzdy = (z[y1 * w + x] - z[y0 * w + x]) / (y1 - y0) as f64;
            let n = [-dzdx, -dzdy, 1.0];
            let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..3 {
                out[c * hw + y * w + x] = n[c] / len;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], out)?)
}

/// Disjoint index ranges: training `0..n_train`, validation right after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<u64>,
    pub val: Range<u64>,
}

pub fn make_split(n_train: u64, n_val: u64) -> Result<Split> {
    if n_train == 0 || n_val == 0 {
        return Err(DataError::Config(format!(
            "split sizes must be positive, got {n_train} train and {n_val} val"
        )));
    }
    Ok(Split {
        train: 0..n_train,
        val: n_train..n_train + n_val,
    })
}

impl Split {
    /// Sample indices of training batch `step`, cycling through the training range.
    pub fn train_batch(&self, step: u64, batch_size: usize) -> Vec<u64> {
        let n = self.train.end - self.train.start;
        (0..batch_size as u64)
            .map(|i| self.train.start + (step * batch_size as u64 + i) % n)
            .collect()
    }

    /// Validation indices in chunks of at most `batch_size`.
    pub fn val_batches(&self, batch_size: usize) -> Vec<Vec<u64>> {
        let all: Vec<u64> = self.val.clone().collect();
        all.chunks(batch_size.max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Network input and per-task labels for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub input: Tensor,
    /// One entry per task, in task order.
    pub labels: Vec<LabelMap>,
}

pub fn collate(samples: &[Sample], specs: &[TaskSpec], num_classes: usize) -> Result<Batch> {
    let first = samples.first().ok_or(DataError::EmptyBatch)?;
    let (h, w) = (first.depth.dims()[1], first.depth.dims()[2]);
    let b = samples.len();
    let hw = h * w;
    let input = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let mut labels = Vec::with_capacity(specs.len());
    for spec in specs {
        labels.push(match spec.kind {
            TaskKind::Segmentation { classes } => {
                if classes != num_classes {
                    return Err(DataError::ClassCount {
                        expected: classes,
                        got: num_classes,
                    });
                }
                let ids = samples.iter().flat_map(|s| s.seg.iter().map(|&c| Some(c))).collect();
                LabelMap::segmentation(b, h, w, ids)?
            }
            TaskKind::Depth => {
                let values = Tensor::stack(&samples.iter().map(|s| s.depth.clone()).collect::<Vec<_>>())?;
                LabelMap::depth(values, vec![true; b * hw])?
            }
            TaskKind::Normals => {
                let values = Tensor::stack(&samples.iter().map(|s| s.normals.clone()).collect::<Vec<_>>())?;
                LabelMap::normals(values, vec![true; b * hw])?
            }
        });
    }
    Ok(Batch { input, labels })
}

/// Generate and collate the samples at `indices`.
pub fn load_batch(config: &SceneConfig, indices: &[u64], specs: &[TaskSpec]) -> Result<Batch> {
    let samples = indices
        .iter()
        .map(|&i| generate_sample(config, i))
        .collect::<Result<Vec<_>>>()?;
    collate(&samples, specs, config.num_classes)
}

pub const RECORD_MAGIC: &[u8; 7] = b"MTANDS1";

/// Write one sample as a flat little-endian record: magic, `H`, `W`, `C` as
/// u32, then the image (f32), segmentation (i32), depth (f32) and normals (f32)
/// arrays, each channel-major and row-major.
pub fn write_record(out: &mut impl Write, sample: &Sample, num_classes: usize) -> Result<()> {
    let (h, w) = (sample.depth.dims()[1], sample.depth.dims()[2]);
    out.write_all(RECORD_MAGIC)?;
    for v in [h, w, num_classes] {
        let v = u32::try_from(v).map_err(|_| DataError::Config(format!("{v} does not fit in u32")))?;
        out.write_all(&v.to_le_bytes())?;
    }
    let floats = |out: &mut dyn Write, t: &Tensor| -> io::Result<()> {
        t.data().iter().try_for_each(|&v| out.write_all(&(v as f32).to_le_bytes()))
    };
    floats(out, &sample.image)?;
    for &c in &sample.seg {
        let c = i32::try_from(c).map_err(|_| DataError::Config(format!("class {c} does not fit in i32")))?;
        out.write_all(&c.to_le_bytes())?;
    }
    floats(out, &sample.depth)?;
    floats(out, &sample.normals)?;
    Ok(())
}
