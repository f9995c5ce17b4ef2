//! Visual token accounting and the geometry of constrained observations.
//!
//! An image of `W x H` pixels costs `floor(W * H / P^2)` tokens (at least one)
//! for patch size `P`. The per-image budget scales with that native count,
//! `clip(floor(tokens / gamma), b_min, b_max)`, and [`downsample`] shrinks any
//! view onto a patch-aligned grid that fits the budget using an area-average
//! filter. [`crop`] always works on exact source pixels.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("crop region {bbox} is empty after clamping to a {width}x{height} image")]
    EmptyRegion {
        bbox: BBox,
        width: usize,
        height: usize,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid budget config: {0}")]
    InvalidConfig(String),
}

/// Owned row-major pixel grid, channel values nominally in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub const DEFAULT_CHANNELS: usize = 3;

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, BudgetError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(BudgetError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(BudgetError::InvalidImage(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Uniformly filled image.
    ///
    /// # Panics
    /// Panics if any dimension is zero.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty image");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Fill an axis-aligned rectangle (clipped to the image) with one color.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: &[f32]) {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        if x0 >= x1 {
            return;
        }
        let ch = self.channels;
        let px: Vec<f32> = (0..ch).map(|c| color[c % color.len()]).collect();
        for y in y0..y1 {
            let row = &mut self.data[(y * self.width + x0) * ch..(y * self.width + x1) * ch];
            for dst in row.chunks_exact_mut(ch) {
                dst.copy_from_slice(&px);
            }
        }
    }

    pub fn tokens(&self, patch_size: usize) -> usize {
        token_count(self.width, self.height, patch_size)
    }

    /// Full bounds as a box in this image's own frame.
    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width as i64, self.height as i64)
    }

    /// SHA-256 over dimensions and little-endian sample bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.channels as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Integer pixel box `[x1, y1, x2, y2)` in the frame of some reference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl BBox {
    pub const fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [i64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> i64 {
        (self.x2 - self.x1).max(0)
    }

    pub fn height(&self) -> i64 {
        (self.y2 - self.y1).max(0)
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as i64, height as i64);
        BBox::new(
            self.x1.clamp(0, w),
            self.y1.clamp(0, h),
            self.x2.clamp(0, w),
            self.y2.clamp(0, h),
        )
    }

    pub fn intersection(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other).area();
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Parameters of the resolution-conditioned budget law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Compression rate applied to the native token count, > 1.
    pub gamma: f64,
    pub b_min: usize,
    pub b_max: usize,
    pub patch_size: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            gamma: 6.25,
            b_min: 169,
            b_max: 1337,
            patch_size: 28,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), BudgetError> {
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return Err(BudgetError::InvalidConfig(format!(
                "gamma must be a finite value > 1, got {}",
                self.gamma
            )));
        }
        if self.b_min == 0 || self.b_min > self.b_max {
            return Err(BudgetError::InvalidConfig(format!(
                "need 0 < b_min <= b_max, got b_min={} b_max={}",
                self.b_min, self.b_max
            )));
        }
        if self.patch_size == 0 {
            return Err(BudgetError::InvalidConfig("patch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Native visual token count of a `width x height` view.
pub fn token_count(width: usize, height: usize, patch_size: usize) -> usize {
    debug_assert!(patch_size > 0);
    ((width * height) / (patch_size * patch_size)).max(1)
}

/// Budget for an image: `clip(floor(tokens / gamma), b_min, b_max)`.
pub fn compute_budget(image: &ImageBuffer, config: &BudgetConfig) -> usize {
    budget_for_dims(image.width(), image.height(), config)
}

pub fn budget_for_dims(width: usize, height: usize, config: &BudgetConfig) -> usize {
    let native = token_count(width, height, config.patch_size) as f64;
    let scaled = (native / config.gamma).floor() as usize;
    scaled.clamp(config.b_min, config.b_max)
}

/// Output dimensions of [`downsample`] for a `width x height` input.
///
/// Identity when the input already fits. Otherwise each side is scaled by
/// `s = sqrt(B P^2 / (W H))` and floored onto the patch grid (never below one
/// patch, never above the input), then the larger side is trimmed one patch
/// at a time while the token count still exceeds the budget.
pub fn downsample_dims(
    width: usize,
    height: usize,
    budget: usize,
    patch_size: usize,
) -> (usize, usize) {
    let budget = budget.max(1);
    if token_count(width, height, patch_size) <= budget {
        return (width, height);
    }
    let p = patch_size as f64;
    let s = (budget as f64 * p * p / (width as f64 * height as f64)).sqrt();
    let fit = |side: usize| -> usize {
        let snapped = ((side as f64 * s) / p).floor() as usize * patch_size;
        snapped.max(patch_size).min(side)
    };
    let (mut w, mut h) = (fit(width), fit(height));
    while token_count(w, h, patch_size) > budget {
        if w >= h && w > patch_size {
            w -= patch_size;
        } else if h > patch_size {
            h -= patch_size;
        } else {
            break;
        }
    }
    (w, h)
}

/// Deterministic budget enforcement with an area-average (box) filter.
pub fn downsample(image: &ImageBuffer, budget: usize, patch_size: usize) -> ImageBuffer {
    let (w, h) = downsample_dims(image.width(), image.height(), budget, patch_size);
    if (w, h) == (image.width(), image.height()) {
        return image.clone();
    }
    resize_area(image, w, h)
}

/// Per-output-sample source spans with exact overlap weights.
struct AreaTaps {
    start: Vec<usize>,
    weights: Vec<Vec<f32>>,
}

fn area_taps(src: usize, dst: usize) -> AreaTaps {
    let ratio = src as f64 / dst as f64;
    let mut start = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for o in 0..dst {
        let lo = o as f64 * ratio;
        let hi = ((o + 1) as f64 * ratio).min(src as f64);
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        let mut ws = Vec::with_capacity(last - first);
        for i in first..last {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            ws.push((overlap / (hi - lo)) as f32);
        }
        start.push(first);
        weights.push(ws);
    }
    AreaTaps { start, weights }
}

/// Area-average resize to arbitrary (smaller or equal) dimensions.
pub fn resize_area(image: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    let ch = image.channels();
    let (sw, sh) = (image.width(), image.height());
    let htaps = area_taps(sw, width);
    let vtaps = area_taps(sh, height);

    // vertical pass over whole rows: height x sw
    let src_stride = sw * ch;
    let mut tmp = vec![0f32; height * src_stride];
    for y in 0..height {
        let s = vtaps.start[y];
        let out = &mut tmp[y * src_stride..(y + 1) * src_stride];
        for (k, &wt) in vtaps.weights[y].iter().enumerate() {
            let src = &image.data()[(s + k) * src_stride..(s + k + 1) * src_stride];
            for (o, v) in out.iter_mut().zip(src) {
                *o += wt * v;
            }
        }
    }

    // horizontal pass: height x width
    let stride = width * ch;
    let mut data = vec![0f32; height * stride];
    for y in 0..height {
        let row = &tmp[y * src_stride..(y + 1) * src_stride];
        let out = &mut data[y * stride..(y + 1) * stride];
        for x in 0..width {
            let s = htaps.start[x];
            let taps = &htaps.weights[x];
            let px = &row[s * ch..(s + taps.len()) * ch];
            let o = &mut out[x * ch..(x + 1) * ch];
            for (k, &wt) in taps.iter().enumerate() {
                for (c, acc) in o.iter_mut().enumerate() {
                    *acc += wt * px[k * ch + c];
                }
            }
        }
    }
    ImageBuffer {
        width,
        height,
        channels: ch,
        data,
    }
}

/// Exact pixel sub-rectangle after clamping `bbox` to the image bounds.
pub fn crop(image: &ImageBuffer, bbox: &BBox) -> Result<ImageBuffer, BudgetError> {
    let clamped = bbox.clamp_to(image.width(), image.height());
    if clamped.is_empty() {
        return Err(BudgetError::EmptyRegion {
            bbox: *bbox,
            width: image.width(),
            height: image.height(),
        });
    }
    let ch = image.channels();
    let (x1, y1, x2, y2) = (
        clamped.x1 as usize,
        clamped.y1 as usize,
        clamped.x2 as usize,
        clamped.y2 as usize,
    );
    let w = x2 - x1;
    let mut data = Vec::with_capacity(w * (y2 - y1) * ch);
    for y in y1..y2 {
        let row = (y * image.width() + x1) * ch;
        data.extend_from_slice(&image.data()[row..row + w * ch]);
    }
    Ok(ImageBuffer {
        width: w,
        height: y2 - y1,
        channels: ch,
        data,
    })
}
