//! Labelled image sets: the seeded synthetic generator, MNIST IDX files,
//! train/validation splitting, batching, and shift/flip augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoAt, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images `[n, h, w, c]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar = f32> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, rows: &[usize], split: Split) -> Self {
        Self {
            images: self.images.gather_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            split,
        }
    }

    /// Seeded shuffle, then the first `val_fraction` of the examples become
    /// the validation split.
    pub fn split_train_val(&self, val_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val, train) = order.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, Split::Train), self.subset(&val, Split::Val)))
    }

    /// Consecutive batches in stored order; the last may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch<T>> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batches_in_order(&rows, batch_size)
    }

    /// Batches over a seeded permutation.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch<T>> {
        let mut rows: Vec<usize> = (0..self.len()).collect();
        rows.shuffle(rng);
        self.batches_in_order(&rows, batch_size)
    }

    fn batches_in_order(&self, rows: &[usize], batch_size: usize) -> Vec<Batch<T>> {
        rows.chunks(batch_size.max(1))
            .map(|chunk| Batch {
                x: self.images.gather_batch(chunk),
                labels: chunk.iter().map(|&r| self.labels[r]).collect(),
            })
            .collect()
    }
}

/// Subtracts each image's mean intensity.
pub fn zero_center<T: Scalar>(images: &mut Tensor<T>) {
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return;
    }
    let per = images.len() / n;
    for img in images.data_mut().chunks_exact_mut(per.max(1)) {
        let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        for v in img.iter_mut() {
            *v = T::from_f64(v.as_f64() - mean);
        }
    }
}

/// Class-conditional elongated Gaussian blobs at random positions.
///
/// Class `k` is oriented at angle `π·k/num_classes`, so classes differ in
/// shape rather than location or brightness. Labels cycle through the
/// classes, keeping them balanced to within one example.
pub fn synth_dataset<T: Scalar>(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if n == 0 || h == 0 || w == 0 || c == 0 || num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs n, h, w, c > 0 and at least 2 classes; got n={n} {h}x{w}x{c}, {num_classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("positive deviation");
    let extent = h.min(w) as f64;
    let (major, minor) = (SYNTH_MAJOR * extent, SYNTH_MINOR * extent);
    let spread = std::f64::consts::PI / num_classes as f64;
    let mut data = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let theta = spread * label as f64 + rng.random_range(-SYNTH_JITTER..=SYNTH_JITTER) * spread;
        let (sin, cos) = theta.sin_cos();
        let cy = rng.random_range(0.3..0.7) * h as f64;
        let cx = rng.random_range(0.3..0.7) * w as f64;
        let amp = rng.random_range(0.8..1.2);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let along = dx * cos + dy * sin;
                let across = -dx * sin + dy * cos;
                let v = amp * (-0.5 * ((along / major).powi(2) + (across / minor).powi(2))).exp();
                for _ in 0..c {
                    data.push(T::from_f64(v + noise.sample(&mut rng)));
                }
            }
        }
        labels.push(label);
    }
    let mut images = Tensor::new(vec![n, h, w, c], data)?;
    zero_center(&mut images);
    Dataset::new(images, labels, num_classes, Split::Train)
}

const SYNTH_MAJOR: f64 = 0.28;
const SYNTH_MINOR: f64 = 0.08;
const SYNTH_NOISE: f64 = 0.15;
/// Orientation jitter as a fraction of the angular gap between classes.
const SYNTH_JITTER: f64 = 0.15;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let actual = read_u32(bytes, 0, what)?;
    if actual != expected {
        return Err(Error::BadMagic {
            expected: format!("{expected:#010x}"),
            actual: format!("{actual:#010x}"),
        });
    }
    Ok(())
}

/// Parses MNIST-style IDX image and label files. Pixels are scaled to
/// `[0, 1]`, zero-centered per image, and replicated `upsample × upsample`.
pub fn load_mnist_idx<T: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    upsample: usize,
) -> Result<Dataset<T>> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img = std::fs::read(images).at(images)?;
    let lab = std::fs::read(labels).at(labels)?;
    parse_mnist_idx(&img, &lab, upsample)
}

pub fn parse_mnist_idx<T: Scalar>(img: &[u8], lab: &[u8], upsample: usize) -> Result<Dataset<T>> {
    if upsample == 0 {
        return Err(Error::InvalidArgument("upsample factor must be at least 1".into()));
    }
    check_magic(img, IDX_IMAGES, "image file")?;
    check_magic(lab, IDX_LABELS, "label file")?;
    let n = read_u32(img, 4, "image file")? as usize;
    let rows = read_u32(img, 8, "image file")? as usize;
    let cols = read_u32(img, 12, "image file")? as usize;
    let n_labels = read_u32(lab, 4, "label file")? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    let pixels = img
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Truncated(format!("image payload: expected {} bytes", n * rows * cols)))?;
    let label_bytes = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Truncated(format!("label payload: expected {n} bytes")))?;
    let (h, w) = (rows * upsample, cols * upsample);
    let mut data = Vec::with_capacity(n * h * w);
    for src in pixels.chunks_exact((rows * cols).max(1)).take(n) {
        for y in 0..h {
            for x in 0..w {
                data.push(T::from_f64(src[(y / upsample) * cols + x / upsample] as f64 / 255.0));
            }
        }
    }
    let mut images = Tensor::new(vec![n, h, w, 1], data)?;
    zero_center(&mut images);
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, 10, Split::Test)
}

/// Random translation by up to `shift` of the extent (zero fill) and,
/// optionally, horizontal flips with probability one half.
pub fn augment<T: Scalar>(batch: &Batch<T>, shift: f64, flip: bool, rng: &mut ChaCha8Rng) -> Batch<T> {
    let s = batch.x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let max_dy = (shift * h as f64).floor() as i64;
    let max_dx = (shift * w as f64).floor() as i64;
    let per = h * w * c;
    let mut out = vec![T::zero(); batch.x.len()];
    for (src, dst) in batch.x.data().chunks_exact(per).zip(out.chunks_exact_mut(per)).take(n) {
        let dy = if max_dy > 0 { rng.random_range(-max_dy..=max_dy) } else { 0 };
        let dx = if max_dx > 0 { rng.random_range(-max_dx..=max_dx) } else { 0 };
        let mirrored = flip && rng.random_bool(0.5);
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx0 = x - dx;
                if sx0 < 0 || sx0 >= w as i64 {
                    continue;
                }
                let sx = if mirrored { w as i64 - 1 - sx0 } else { sx0 };
                let from = ((sy as usize * w) + sx as usize) * c;
                let to = ((y as usize * w) + x as usize) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Batch {
        x: Tensor::new(s.to_vec(), out).expect("same shape"),
        labels: batch.labels.clone(),
    }
}
