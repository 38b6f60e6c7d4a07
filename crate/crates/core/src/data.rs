//! Synthetic segmentation scenes and training-time augmentation.
//!
//! A scene is a background of class 0 with rectangles, disks and full-width
//! or full-height stripes painted on top, each filled with a jittered version
//! of its class colour. Optional shadows darken a rectangular region of the
//! image without touching the labels, so one class can show two quite
//! different appearances. Gaussian noise is added last and the image is
//! clamped to `[0, 1]`.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::ops::resize;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shapes_per_image: usize,
    pub noise_std: f64,
    pub shadow_prob: f64,
    /// Rectangle and stripe edges and disk centres snap to multiples of
    /// this many pixels; 1 leaves them free.
    pub grid: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            num_classes: 4,
            shapes_per_image: 2,
            noise_std: 0.05,
            shadow_prob: 0.3,
            grid: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub seed: u64,
}

/// Base colour of a class. Class 0 is mid grey; the others are spread
/// around the hue circle starting at red.
pub fn class_color(class: usize, num_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.5, 0.5, 0.5];
    }
    let hue = (class - 1) as f64 / (num_classes - 1).max(1) as f64 * 360.0;
    let (s, v) = (0.75, 0.85);
    let c = v * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Largest per-channel offset applied to a shape's class colour.
pub const COLOR_JITTER: f64 = 0.06;

enum Shape {
    Rect { top: usize, left: usize, h: usize, w: usize },
    Disk { cy: f64, cx: f64, r: f64 },
    Stripe { vertical: bool, start: usize, width: usize },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { top, left, h, w } => y >= top && y < top + h && x >= left && x < left + w,
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
            Shape::Stripe { vertical, start, width } => {
                let v = if vertical { x } else { y };
                v >= start && v < start + width
            }
        }
    }

    fn random(rng: &mut Rng, h: usize, w: usize, grid: usize) -> Shape {
        let short = h.min(w);
        // Multiple of `grid` in [lo, hi], assuming one exists.
        let snapped = |rng: &mut Rng, lo: usize, hi: usize| {
            grid * rng::below(rng, lo.div_ceil(grid), hi / grid + 1)
        };
        match rng::below(rng, 0, 3) {
            0 => {
                let sh = snapped(rng, (h * 3 / 8).max(1), h * 3 / 4);
                let sw = snapped(rng, (w * 3 / 8).max(1), w * 3 / 4);
                Shape::Rect {
                    top: snapped(rng, 0, h - sh),
                    left: snapped(rng, 0, w - sw),
                    h: sh,
                    w: sw,
                }
            }
            1 => {
                let r = rng::uniform(rng, short as f64 / 4.0, short as f64 * 3.0 / 8.0);
                let centre = |rng: &mut Rng, len: usize| {
                    let lo = r.ceil() as usize;
                    let hi = (len as f64 - r).floor() as usize;
                    if grid > 1 && lo.div_ceil(grid) * grid <= hi {
                        snapped(rng, lo, hi) as f64
                    } else {
                        rng::uniform(rng, r, len as f64 - r)
                    }
                };
                Shape::Disk {
                    cy: centre(rng, h),
                    cx: centre(rng, w),
                    r,
                }
            }
            _ => {
                let vertical = rng::bernoulli(rng, 0.5);
                let len = if vertical { w } else { h };
                let width = snapped(rng, (len * 3 / 8).max(1), len / 2);
                Shape::Stripe {
                    vertical,
                    start: snapped(rng, 0, len - width),
                    width,
                }
            }
        }
    }
}

/// Deterministic scene for `seed`.
pub fn gen_synthetic_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    let (h, w) = (config.height, config.width);
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene size {h}x{w} must be positive multiples of 8"
        )));
    }
    if config.grid == 0 || h % config.grid != 0 || w % config.grid != 0 {
        return Err(Error::InvalidArgument(format!(
            "shape grid {} must divide the scene size {h}x{w}",
            config.grid
        )));
    }
    if config.num_classes < 2 {
        return Err(Error::InvalidArgument("scenes need at least two classes".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut labels = vec![0i32; h * w];
    let bg = class_color(0, config.num_classes);
    let mut image = Tensor::from_fn(&[3, h, w], |i| bg[i / (h * w)]);

    for _ in 0..config.shapes_per_image {
        let class = rng::below(&mut rng, 1, config.num_classes);
        let base = class_color(class, config.num_classes);
        let color: Vec<f32> = base
            .iter()
            .map(|&c| (c as f64 + rng::uniform(&mut rng, -COLOR_JITTER, COLOR_JITTER)) as f32)
            .collect();
        let shape = Shape::random(&mut rng, h, w, config.grid);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    labels[y * w + x] = class as i32;
                    for (ch, &c) in color.iter().enumerate() {
                        image.data_mut()[(ch * h + y) * w + x] = c;
                    }
                }
            }
        }
    }

    if rng::bernoulli(&mut rng, config.shadow_prob) {
        let sh = rng::below(&mut rng, h / 4, h / 2 + 1);
        let sw = rng::below(&mut rng, w / 4, w / 2 + 1);
        let top = rng::below(&mut rng, 0, h - sh + 1);
        let left = rng::below(&mut rng, 0, w - sw + 1);
        let factor = rng::uniform(&mut rng, 0.45, 0.7) as f32;
        for ch in 0..3 {
            for y in top..top + sh {
                for x in left..left + sw {
                    image.data_mut()[(ch * h + y) * w + x] *= factor;
                }
            }
        }
    }

    if config.noise_std > 0.0 {
        for v in image.data_mut() {
            *v = (*v as f64 + config.noise_std * rng::normal(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    Ok(SyntheticScene {
        image,
        labels: LabelMap::new(h, w, labels)?,
        seed,
    })
}

/// Scenes `seed ^ 0, seed ^ 1, …`.
pub fn gen_dataset(seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .map(|i| gen_synthetic_scene(rng::item_seed(seed, i), config))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scales: Vec<f64>,
    /// Output is always `crop × crop`.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            scales: vec![0.5, 0.75, 1.0, 1.5, 1.75, 2.0],
            crop: 32,
        }
    }
}

pub fn flip_horizontal(scene: &SyntheticScene) -> SyntheticScene {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let mut image = scene.image.clone();
    let mut labels = scene.labels.clone();
    for row in 0..3 * h {
        image.data_mut()[row * w..(row + 1) * w].reverse();
    }
    for row in 0..h {
        labels.labels_mut()[row * w..(row + 1) * w].reverse();
    }
    SyntheticScene {
        image,
        labels,
        seed: scene.seed,
    }
}

/// Nearest-neighbour label resize using the same half-pixel centres as the
/// bilinear image resize.
pub fn resize_labels(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (labels.height(), labels.width());
    let src = |o: usize, inp: usize, out: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let data = (0..out_h)
        .flat_map(|y| (0..out_w).map(move |x| (y, x)))
        .map(|(y, x)| labels.get(src(y, h, out_h), src(x, w, out_w)))
        .collect();
    LabelMap::with_ignore(out_h, out_w, data, labels.ignore_index())
}

/// Bilinear image and nearest-label resize of a whole scene.
pub fn rescale(scene: &SyntheticScene, out_h: usize, out_w: usize) -> Result<SyntheticScene> {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let image = scene.image.clone().reshape(&[1, 3, h, w])?;
    let image = resize::resize_bilinear(&image, out_h, out_w)?.reshape(&[3, out_h, out_w])?;
    Ok(SyntheticScene {
        image,
        labels: resize_labels(&scene.labels, out_h, out_w)?,
        seed: scene.seed,
    })
}

/// Copies the `size_h × size_w` window at `(top, left)`; positions beyond
/// the source are zero in the image and ignored in the labels.
pub fn crop_or_pad(scene: &SyntheticScene, top: usize, left: usize, size_h: usize, size_w: usize) -> SyntheticScene {
    let (h, w) = (scene.labels.height(), scene.labels.width());
    let mut image = Tensor::zeros(&[3, size_h, size_w]);
    let mut labels = vec![IGNORE_INDEX; size_h * size_w];
    for y in 0..size_h {
        for x in 0..size_w {
            let (sy, sx) = (top + y, left + x);
            if sy < h && sx < w {
                labels[y * size_w + x] = scene.labels.get(sy, sx);
                for ch in 0..3 {
                    image.data_mut()[(ch * size_h + y) * size_w + x] = scene.image.data()[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    SyntheticScene {
        image,
        labels: LabelMap::with_ignore(size_h, size_w, labels, scene.labels.ignore_index())
            .expect("positive crop"),
        seed: scene.seed,
    }
}

/// Random flip, random rescale, then a random crop (or bottom/right zero
/// padding) to `crop × crop`.
pub fn augment(scene: &SyntheticScene, rng: &mut Rng, config: &AugmentConfig) -> Result<SyntheticScene> {
    if config.crop == 0 || !config.crop.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "crop size {} must be a positive multiple of 8",
            config.crop
        )));
    }
    if config.scales.is_empty() || config.scales.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::InvalidArgument("augmentation scales must be positive".into()));
    }
    let mut out = if rng::bernoulli(rng, config.flip_prob) {
        flip_horizontal(scene)
    } else {
        scene.clone()
    };
    let scale = config.scales[rng::below(rng, 0, config.scales.len())];
    let (h, w) = (out.labels.height(), out.labels.width());
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    if (nh, nw) != (h, w) {
        out = rescale(&out, nh, nw)?;
    }
    let top = if nh > config.crop { rng::below(rng, 0, nh - config.crop + 1) } else { 0 };
    let left = if nw > config.crop { rng::below(rng, 0, nw - config.crop + 1) } else { 0 };
    if (top, left, nh, nw) == (0, 0, config.crop, config.crop) {
        return Ok(out);
    }
    Ok(crop_or_pad(&out, top, left, config.crop, config.crop))
}

/// Stacks scenes into a `[B, 3, H, W]` batch and its label maps.
pub fn batch(scenes: &[SyntheticScene]) -> Result<(Tensor<f32>, Vec<LabelMap>)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.labels.height(), first.labels.width());
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    for s in scenes {
        if s.labels.height() != h || s.labels.width() != w {
            return Err(Error::shape(
                "batch",
                &[h, w],
                &[s.labels.height(), s.labels.width()],
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    let labels = scenes.iter().map(|s| s.labels.clone()).collect();
    Ok((Tensor::new(vec![scenes.len(), 3, h, w], data)?, labels))
}
