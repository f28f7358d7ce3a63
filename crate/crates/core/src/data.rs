//! Synthetic content/style images and IDX file I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{ImageBatch, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::{self, stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Class-conditional signal: an oriented sinusoidal grating shared by all
/// channels, one orientation per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentLaw {
    /// Grating amplitude around mid-gray; the class margin.
    pub amplitude: f64,
    /// Spatial frequency in cycles per image side.
    pub frequency: f64,
    /// Per-sample phase jitter, uniform in `±phase_jitter` radians.
    pub phase_jitter: f64,
    /// I.i.d. Gaussian pixel noise.
    pub noise: f64,
}

/// Label-independent nuisance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleLaw {
    /// Per-sample, per-channel color offset, uniform in `±color`.
    pub color: f64,
    /// Per-sample random low-frequency texture amplitude.
    pub texture: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentStyleSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shape: ImageShape,
    pub content: ContentLaw,
    pub style: StyleLaw,
    pub seed: u64,
}

impl Default for ContentStyleSpec {
    /// 4 classes × (500 train + 200 test) of 16×16×3.
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 500,
            test_per_class: 200,
            shape: ImageShape::new(16, 16, 3),
            content: ContentLaw {
                amplitude: 0.1,
                frequency: 2.5,
                phase_jitter: 0.3,
                noise: 0.04,
            },
            style: StyleLaw {
                color: 0.15,
                texture: 0.08,
            },
            seed: 0,
        }
    }
}

impl ContentStyleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.train_per_class + self.test_per_class == 0 {
            return bad("no samples requested");
        }
        if self.shape.dim() == 0 {
            return bad("image shape must be non-empty");
        }
        if !(self.content.amplitude > 0.0) {
            return bad("content amplitude (class margin) must be positive");
        }
        if !(self.content.noise >= 0.0 && self.content.phase_jitter >= 0.0 && self.content.frequency > 0.0) {
            return bad("content noise, jitter and frequency must be nonnegative / positive");
        }
        if !(self.style.color >= 0.0 && self.style.texture >= 0.0) {
            return bad("style amplitudes must be nonnegative");
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }

    /// Orientation of class `c`'s grating.
    pub fn orientation(&self, class: usize) -> f64 {
        PI * class as f64 / self.num_classes as f64
    }
}

/// All `num_classes × per_class` samples; sample `k` has label `k mod num_classes`.
pub fn generate(spec: &ContentStyleSpec) -> Result<ImageBatch> {
    spec.validate()?;
    let shape = spec.shape;
    let total = spec.num_classes * spec.per_class();
    let (h, w) = (shape.height as f64, shape.width as f64);
    let mut pixels = Matrix::zeros(total, shape.dim());
    let mut labels = Vec::with_capacity(total);
    let noise = Normal::new(0.0, spec.content.noise.max(0.0)).expect("valid sigma");
    for k in 0..total {
        let class = k % spec.num_classes;
        labels.push(class);
        let mut rng = seed::rng(spec.seed, &[stream::DATA, k as u64]);
        let theta = spec.orientation(class);
        let (ct, st) = (theta.cos(), theta.sin());
        let omega = 2.0 * PI * spec.content.frequency;
        let phase = if spec.content.phase_jitter > 0.0 {
            rng.random_range(-spec.content.phase_jitter..=spec.content.phase_jitter)
        } else {
            0.0
        };
        let color: Vec<f64> = (0..shape.channels)
            .map(|_| if spec.style.color > 0.0 { rng.random_range(-spec.style.color..=spec.style.color) } else { 0.0 })
            .collect();
        // Texture: one random low-frequency plane wave with random direction and phase.
        let tex_dir: f64 = rng.random_range(0.0..PI);
        let tex_phase: f64 = rng.random_range(0.0..2.0 * PI);
        let tex_freq: f64 = rng.random_range(1.0..4.0);
        let row = pixels.row_mut(k);
        for y in 0..shape.height {
            for x in 0..shape.width {
                let (u, v) = ((x as f64 + 0.5) / w - 0.5, (y as f64 + 0.5) / h - 0.5);
                let content = spec.content.amplitude * (omega * (ct * u + st * v) + phase).sin();
                let texture = spec.style.texture
                    * (2.0 * PI * tex_freq * (tex_dir.cos() * u + tex_dir.sin() * v) + tex_phase).sin();
                for (c, &offset) in color.iter().enumerate() {
                    let n = if spec.content.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    row[shape.index(y, x, c)] = (0.5 + content + texture + offset + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    ImageBatch::new(shape, pixels, Some(labels))
}

/// Disjoint, exhaustive per-class split: `(train, test)`.
pub fn split(spec: &ContentStyleSpec, all: &ImageBatch) -> Result<(ImageBatch, ImageBatch)> {
    let labels = all.labels().ok_or_else(|| Error::LabelMismatch("split needs labels".into()))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut rng = seed::rng(spec.seed, &[stream::DATA, u64::MAX]);
    for class in 0..spec.num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let cut = spec.train_per_class.min(members.len());
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((all.select(&train), all.select(&test)))
}

pub fn generate_split(spec: &ContentStyleSpec) -> Result<(ImageBatch, ImageBatch)> {
    let all = generate(spec)?;
    split(spec, &all)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated")))
}

/// Reads an IDX image file (`0x00000803`, `n × rows × cols` bytes) and its
/// label file (`0x00000801`), scaling pixels by `1/255`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ImageBatch> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&img, &lab)
}

pub fn parse_idx(img: &[u8], lab: &[u8]) -> Result<ImageBatch> {
    let magic = read_u32(img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(img, 4, "images")? as usize;
    let rows = read_u32(img, 8, "images")? as usize;
    let cols = read_u32(img, 12, "images")? as usize;
    let magic = read_u32(lab, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let nl = read_u32(lab, 4, "labels")? as usize;
    if nl != n {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let payload = &img[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "images: expected {} payload bytes, found {}",
            n * rows * cols,
            payload.len()
        )));
    }
    let lpayload = &lab[8..];
    if lpayload.len() != n {
        return Err(Error::Format(format!("labels: expected {n} payload bytes, found {}", lpayload.len())));
    }
    let pixels = Matrix::from_vec(n, rows * cols, payload.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels = lpayload.iter().map(|&b| b as usize).collect();
    ImageBatch::new(ImageShape::new(rows, cols, 1), pixels, Some(labels))
}

/// Encodes a single-channel labelled batch as IDX bytes `(images, labels)`; pixels are rounded to `/255`.
pub fn encode_idx(batch: &ImageBatch) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = batch.shape();
    if shape.channels != 1 {
        return Err(Error::Format(format!("IDX images are single-channel, got {}", shape.channels)));
    }
    let labels = batch.labels().ok_or_else(|| Error::Format("IDX export needs labels".into()))?;
    let n = batch.len() as u32;
    let mut img = Vec::with_capacity(16 + batch.pixels().len());
    for v in [IDX_IMAGES_MAGIC, n, shape.height as u32, shape.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(batch.pixels().as_slice().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    Ok((img, lab))
}

pub fn write_idx(batch: &ImageBatch, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(batch)?;
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
    Ok(())
}
