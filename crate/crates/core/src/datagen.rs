//! Image corpora: a procedural grating generator and a CIFAR binary reader.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OclError, Result};

/// Bytes per CIFAR-10 binary record: one label byte plus a 3x32x32 image.
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_CLASSES: u8 = 10;

/// A batch of images with pixel values in `[0, 1]`, laid out `[B, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub labels: Option<Vec<usize>>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != pixels.shape()[0] {
                return Err(OclError::Shape {
                    op: "ImageBatch::new",
                    detail: format!("{} labels for {} images", l.len(), pixels.shape()[0]),
                });
            }
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(Axis(0), i)
    }

    /// Copies the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let pixels = self.pixels.select(Axis(0), indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        ImageBatch { pixels, labels }
    }

    /// Checks the batch invariants: at least one image, finite pixels in
    /// `[0, 1]`, and a resolution divisible by `patch`.
    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.is_empty() {
            return Err(OclError::config("data", "empty image batch"));
        }
        if patch == 0 || self.height() % patch != 0 || self.width() % patch != 0 {
            return Err(OclError::config(
                "model.patch_size",
                format!(
                    "{}x{} images are not divisible into {patch}x{patch} patches",
                    self.height(),
                    self.width()
                ),
            ));
        }
        if let Some(v) = self
            .pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(OclError::format("image batch", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Synthetic,
    CifarBinary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub source: CorpusSource,
    /// Only read for `cifar-binary`.
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            source: CorpusSource::Synthetic,
            path: None,
            num_classes: 10,
            images_per_class: 100,
            seed: 0,
            image_size: 32,
            channels: 3,
        }
    }
}

impl CorpusSpec {
    pub fn synthetic(num_classes: usize, images_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes,
            images_per_class,
            seed,
            ..Self::default()
        }
    }

    pub fn load(&self) -> Result<ImageBatch> {
        match self.source {
            CorpusSource::Synthetic => generate_synthetic(self),
            CorpusSource::CifarBinary => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| OclError::config("data.path", "required for cifar-binary corpora"))?;
                if !path.exists() {
                    return Err(OclError::config(
                        "data.path",
                        format!("{} does not exist", path.display()),
                    ));
                }
                load_cifar_binary(path)
            }
        }
    }
}

const PIXEL_NOISE: f64 = 0.25;

/// Per-class grating geometry: orientation in radians and spatial frequency
/// in cycles per image side.
fn class_grating(class: usize, num_classes: usize) -> (f64, f64) {
    let orientation = PI * class as f64 / num_classes as f64;
    let frequency = 2.0 + (class % 3) as f64;
    (orientation, frequency)
}

/// Generates a class-structured corpus of sinusoidal gratings.
///
/// Class `k` fixes the grating orientation and frequency; each image draws its
/// own phase, amplitude, per-channel gain and pixel noise. Images are ordered
/// class-major, so labels read `[0, 0, .., 1, 1, ..]`.
///
/// The noise is strong enough that features from an untrained encoder do not
/// saturate a linear probe, while the half-period phase range keeps the class
/// means apart in raw pixel space.
pub fn generate_synthetic(spec: &CorpusSpec) -> Result<ImageBatch> {
    if spec.num_classes == 0 {
        return Err(OclError::config("data.num_classes", "must be at least 1"));
    }
    if spec.images_per_class == 0 {
        return Err(OclError::config("data.images_per_class", "must be at least 1"));
    }
    if spec.image_size == 0 || spec.channels == 0 {
        return Err(OclError::config("data.image_size", "image size and channels must be positive"));
    }
    let side = spec.image_size;
    let total = spec.num_classes * spec.images_per_class;
    let mut pixels = Array4::<f32>::zeros((total, spec.channels, side, side));
    let mut labels = Vec::with_capacity(total);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");

    for class in 0..spec.num_classes {
        let (theta, freq) = class_grating(class, spec.num_classes);
        let (dx, dy) = (theta.cos(), theta.sin());
        for i in 0..spec.images_per_class {
            let idx = class * spec.images_per_class + i;
            let phase = rng.random_range(0.0..PI);
            let amplitude = rng.random_range(0.25..0.45);
            let gains: Vec<f64> = (0..spec.channels)
                .map(|_| rng.random_range(0.8..1.0))
                .collect();
            let mut img = pixels.slice_mut(s![idx, .., .., ..]);
            for y in 0..side {
                for x in 0..side {
                    let u = (x as f64 * dx + y as f64 * dy) / side as f64;
                    let wave = (2.0 * PI * freq * u + phase).sin();
                    for (c, gain) in gains.iter().enumerate() {
                        let v = 0.5 + amplitude * gain * wave + noise.sample(&mut rng);
                        img[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            labels.push(class);
        }
    }
    ImageBatch::new(pixels, Some(labels))
}

/// Reads CIFAR-10 binary records (`1 + 3*32*32` bytes, channel-planar,
/// row-major) and scales pixels by `1/255`.
pub fn load_cifar_binary(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path).map_err(|e| OclError::io(path, e))?;
    decode_cifar_binary(&bytes).map_err(|e| match e {
        OclError::Format { reason, .. } => OclError::format(path.display().to_string(), reason),
        other => other,
    })
}

pub fn decode_cifar_binary(bytes: &[u8]) -> Result<ImageBatch> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(OclError::format(
            "cifar binary",
            format!(
                "{} bytes is not a positive multiple of the {CIFAR_RECORD_BYTES}-byte record",
                bytes.len()
            ),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Array4::<f32>::zeros((count, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE));
    let mut labels = Vec::with_capacity(count);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label >= CIFAR_CLASSES {
            return Err(OclError::format(
                "cifar binary",
                format!("record {i} has label byte {label}"),
            ));
        }
        labels.push(label as usize);
        let dst = pixels.slice_mut(s![i, .., .., ..]);
        for (d, &b) in dst.into_iter().zip(&record[1..]) {
            *d = b as f32 / 255.0;
        }
    }
    ImageBatch::new(pixels, Some(labels))
}

/// Encodes a 3x32x32 labelled batch in the CIFAR binary layout. Pixels are
/// rounded to the nearest of 256 levels.
pub fn encode_cifar_binary(batch: &ImageBatch) -> Result<Vec<u8>> {
    if batch.channels() != CIFAR_CHANNELS
        || batch.height() != CIFAR_SIDE
        || batch.width() != CIFAR_SIDE
    {
        return Err(OclError::config(
            "data.image_size",
            "cifar export needs 3x32x32 images",
        ));
    }
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| OclError::config("data", "cifar export needs labels"))?;
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD_BYTES);
    for (i, &label) in labels.iter().enumerate() {
        if label >= CIFAR_CLASSES as usize {
            return Err(OclError::config(
                "data.num_classes",
                format!("label {label} does not fit the 10-class cifar layout"),
            ));
        }
        out.push(label as u8);
        out.extend(
            batch
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar_binary(batch: &ImageBatch, path: &Path) -> Result<()> {
    let bytes = encode_cifar_binary(batch)?;
    fs::write(path, bytes).map_err(|e| OclError::io(path, e))
}

/// One epoch of shuffled mini-batches over a corpus.
///
/// The permutation is a function of `(shuffle_seed, epoch)` only, so any
/// epoch can be replayed without iterating the ones before it.
pub struct BatchIterator<'a> {
    corpus: &'a ImageBatch,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    drop_last: bool,
}

pub fn batch_iterator(
    corpus: &ImageBatch,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    drop_last: bool,
) -> Result<BatchIterator<'_>> {
    if batch_size < 2 {
        return Err(OclError::config(
            "train.batch_size",
            format!("{batch_size} leaves no in-batch negatives; need at least 2"),
        ));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIterator {
        corpus,
        order,
        batch_size,
        cursor: 0,
        drop_last,
    })
}

/// Number of batches one epoch yields.
pub fn batches_per_epoch(len: usize, batch_size: usize, drop_last: bool) -> usize {
    if drop_last {
        len / batch_size
    } else {
        len.div_ceil(batch_size)
    }
}

impl BatchIterator<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        let remaining = self.order.len() - self.cursor;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.corpus.select(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}
