//! Seeded multi-scale crops, fixed-scale patches and per-channel style jitter.
//!
//! Views are produced by a sparse bilinear [`RowMap`] from the source image
//! rows, so the same map can be replayed on a tape when an attack must
//! differentiate through the cropping.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{MappedRow, Matrix, RowMap};
use crate::seed;

/// Attempts at drawing a crop that fits before falling back to the full image.
pub const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Flattened length `H·W·ch`.
    pub const fn dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub const fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }
}

/// `n` images stored one per row in HWC order, pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    shape: ImageShape,
    pixels: Matrix<f64>,
    labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(shape: ImageShape, pixels: Matrix<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if pixels.cols() != shape.dim() {
            return Err(Error::shape("ImageBatch", shape.dim(), pixels.cols()));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.rows() {
                return Err(Error::CountMismatch {
                    images: pixels.rows(),
                    labels: l.len(),
                });
            }
        }
        if pixels.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidSpec("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { shape, pixels, labels })
    }

    /// Clamps every pixel into `[0, 1]` instead of rejecting out-of-range input.
    pub fn clamped(shape: ImageShape, mut pixels: Matrix<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        for p in pixels.as_mut_slice() {
            *p = p.clamp(0.0, 1.0);
        }
        Self::new(shape, pixels, labels)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.rows() == 0
    }

    pub fn pixels(&self) -> &Matrix<f64> {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len() {
                return Err(Error::CountMismatch {
                    images: self.len(),
                    labels: l.len(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn pixel(&self, i: usize, y: usize, x: usize, c: usize) -> f64 {
        self.pixels.get(i, self.shape.index(y, x, c))
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let cols = self.shape.dim();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.pixels.row(i));
        }
        Self {
            shape: self.shape,
            pixels: Matrix::from_vec(indices.len(), cols, data).expect("rows of a valid batch"),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn range(&self, start: usize, len: usize) -> Self {
        self.select(&(start..start + len).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    /// Multi-scale random resized crops.
    Crop,
    /// Fixed-scale patches (scale bounds typically equal).
    Patch,
    /// The whole image, one view.
    Central,
}

/// Per-channel affine law `p ↦ clamp(scale·p + shift)`, each drawn uniformly from its range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterLaw {
    pub shift: (f64, f64),
    pub scale: (f64, f64),
}

impl JitterLaw {
    pub const IDENTITY: Self = Self {
        shift: (0.0, 0.0),
        scale: (1.0, 1.0),
    };

    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.shift) || !ok(self.scale) {
            return Err(Error::InvalidSpec(format!("jitter bounds inverted: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub mode: AugmentMode,
    /// Area fraction bounds.
    pub scales: (f64, f64),
    /// Aspect-ratio (width / height) bounds.
    pub ratios: (f64, f64),
    pub crop_count: usize,
    /// Output `(height, width)`.
    pub out_size: (usize, usize),
    #[serde(default)]
    pub style_jitter: Option<JitterLaw>,
}

impl AugmentSpec {
    /// Multi-scale crops with scales (0.08, 1.0) and ratios (0.75, 1.3).
    pub fn crops(count: usize, out_size: (usize, usize)) -> Self {
        Self {
            mode: AugmentMode::Crop,
            scales: (0.08, 1.0),
            ratios: (0.75, 1.3),
            crop_count: count,
            out_size,
            style_jitter: None,
        }
    }

    /// Fixed quarter-area square patches.
    pub fn patches(count: usize, out_size: (usize, usize)) -> Self {
        Self {
            mode: AugmentMode::Patch,
            scales: (0.25, 0.25),
            ratios: (1.0, 1.0),
            crop_count: count,
            out_size,
            style_jitter: None,
        }
    }

    pub fn central(out_size: (usize, usize)) -> Self {
        Self {
            mode: AugmentMode::Central,
            scales: (1.0, 1.0),
            ratios: (1.0, 1.0),
            crop_count: 1,
            out_size,
            style_jitter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (slo, shi) = self.scales;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return Err(Error::InvalidSpec(format!("scales must satisfy 0 < low <= high <= 1, got {:?}", self.scales)));
        }
        let (rlo, rhi) = self.ratios;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::InvalidSpec(format!("ratios must satisfy 0 < low <= high, got {:?}", self.ratios)));
        }
        if self.crop_count == 0 {
            return Err(Error::InvalidSpec("crop_count must be at least 1".into()));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(Error::InvalidSpec("out_size must be positive".into()));
        }
        if let Some(j) = &self.style_jitter {
            j.validate()?;
        }
        Ok(())
    }

    /// Number of views produced per image.
    pub fn views(&self) -> usize {
        match self.mode {
            AugmentMode::Central => 1,
            _ => self.crop_count,
        }
    }

    pub fn out_shape(&self, source: ImageShape) -> ImageShape {
        ImageShape::new(self.out_size.0, self.out_size.1, source.channels)
    }

    pub fn without_jitter(&self) -> Self {
        Self {
            style_jitter: None,
            ..self.clone()
        }
    }
}

/// Axis-aligned source region of one view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn full(shape: ImageShape) -> Self {
        Self {
            top: 0,
            left: 0,
            height: shape.height,
            width: shape.width,
        }
    }
}

/// Draws a crop window the way random-resized-crop does: area fraction and
/// log-uniform aspect ratio, retried up to [`MAX_CROP_ATTEMPTS`] times.
pub fn sample_window(shape: ImageShape, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> CropWindow {
    if spec.mode == AugmentMode::Central {
        return CropWindow::full(shape);
    }
    let area = (shape.height * shape.width) as f64;
    let (llo, lhi) = (spec.ratios.0.ln(), spec.ratios.1.ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = area * rng.random_range(spec.scales.0..=spec.scales.1);
        let ratio = rng.random_range(llo..=lhi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= shape.width && h <= shape.height {
            let top = rng.random_range(0..=shape.height - h);
            let left = rng.random_range(0..=shape.width - w);
            return CropWindow {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    CropWindow::full(shape)
}

/// Corner-aligned bilinear source coordinates for output index `o` of `n_out`
/// over a window `[start, start + len)`.
fn source_coord(o: usize, n_out: usize, start: usize, len: usize) -> (usize, usize, f64) {
    let pos = if n_out > 1 {
        start as f64 + o as f64 * (len - 1) as f64 / (n_out - 1) as f64
    } else {
        start as f64 + (len - 1) as f64 / 2.0
    };
    let lo = (pos.floor() as usize).min(start + len - 1);
    let hi = (lo + 1).min(start + len - 1);
    (lo, hi, pos - lo as f64)
}

/// Sparse bilinear map taking source row `src` through `window` to an `out` image.
pub fn resample_row(src: usize, window: CropWindow, shape: ImageShape, out: ImageShape) -> MappedRow<f64> {
    let ch = shape.channels;
    let mut terms = Vec::with_capacity(out.dim() * 4);
    for oy in 0..out.height {
        let (y0, y1, fy) = source_coord(oy, out.height, window.top, window.height);
        for ox in 0..out.width {
            let (x0, x1, fx) = source_coord(ox, out.width, window.left, window.width);
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for c in 0..ch {
                let oc = out.index(oy, ox, c) as u32;
                for &(y, x, w) in &corners {
                    if w != 0.0 {
                        terms.push((oc, shape.index(y, x, c) as u32, w));
                    }
                }
            }
        }
    }
    MappedRow { src, terms }
}

/// Per-slot crop windows for `n` images: `windows[slot][image]`.
pub fn plan_windows(n: usize, shape: ImageShape, spec: &AugmentSpec, seed: u64) -> Vec<Vec<CropWindow>> {
    (0..spec.views())
        .map(|slot| {
            (0..n)
                .map(|i| {
                    let mut rng = seed::rng(seed, &[i as u64, slot as u64]);
                    sample_window(shape, spec, &mut rng)
                })
                .collect()
        })
        .collect()
}

/// Row map producing every view of every image, slot-major: row `slot·n + i`.
pub fn views_row_map(windows: &[Vec<CropWindow>], shape: ImageShape, out: ImageShape) -> RowMap<f64> {
    let rows = windows
        .iter()
        .flat_map(|slot| slot.iter().enumerate().map(|(i, &w)| resample_row(i, w, shape, out)))
        .collect();
    RowMap {
        out_cols: out.dim(),
        rows,
    }
}

/// Draws `C` views of every image. View `k` of image `i` depends only on
/// `(seed, i, k)`.
pub fn sample_views(img: &ImageBatch, spec: &AugmentSpec, seed: u64) -> Result<Vec<ImageBatch>> {
    spec.validate()?;
    let shape = img.shape();
    let out = spec.out_shape(shape);
    let n = img.len();
    if spec.mode == AugmentMode::Central && out == shape && spec.style_jitter.is_none() {
        return Ok(vec![img.clone()]);
    }
    let windows = plan_windows(n, shape, spec, seed);
    let map = views_row_map(&windows, shape, out);
    let all = map.apply(img.pixels());
    let mut views = Vec::with_capacity(spec.views());
    for slot in 0..spec.views() {
        let mut view = ImageBatch::clamped(out, all.slice_rows(slot * n, n), img.labels.clone())?;
        if let Some(law) = &spec.style_jitter {
            view = jitter_rows(&view, law, |i| seed::derive(seed, &[i as u64, slot as u64, 0x717]))?;
        }
        views.push(view);
    }
    Ok(views)
}

/// Shared row map for all views as an `Arc`, for differentiable replay.
pub fn views_row_map_shared(n: usize, shape: ImageShape, spec: &AugmentSpec, seed: u64) -> Arc<RowMap<f64>> {
    let windows = plan_windows(n, shape, spec, seed);
    Arc::new(views_row_map(&windows, shape, spec.out_shape(shape)))
}

fn jitter_rows(img: &ImageBatch, law: &JitterLaw, seed_of: impl Fn(usize) -> u64) -> Result<ImageBatch> {
    law.validate()?;
    let shape = img.shape();
    let mut px = img.pixels().clone();
    for i in 0..img.len() {
        let mut rng = seed::rng(seed_of(i), &[]);
        let params: Vec<(f64, f64)> = (0..shape.channels)
            .map(|_| {
                let s = rng.random_range(law.scale.0..=law.scale.1);
                let b = rng.random_range(law.shift.0..=law.shift.1);
                (s, b)
            })
            .collect();
        for (k, p) in px.row_mut(i).iter_mut().enumerate() {
            let (s, b) = params[k % shape.channels];
            *p = (s * *p + b).clamp(0.0, 1.0);
        }
    }
    ImageBatch::new(shape, px, img.labels.clone())
}

/// Per-image, per-channel affine perturbation clamped into `[0, 1]`; labels unchanged.
pub fn style_jitter(img: &ImageBatch, law: &JitterLaw, seed: u64) -> Result<ImageBatch> {
    jitter_rows(img, law, |i| seed::derive(seed, &[i as u64]))
}
