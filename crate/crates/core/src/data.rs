//! Datasets: CIFAR-10 binary batches, a seeded synthetic generator, and
//! weight histograms.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel statistics of a dataset's pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Images `N×3×H×W` in `[0, 1]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "images must be N×3×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images for {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} outside 0..{classes}")));
        }
        let normalization = channel_stats(&images);
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Rows `indices` as a new tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (x, y) = self.batch(&idx)?;
        Dataset::new(x, y, self.classes, self.split)
    }

    /// Seeded disjoint split into `(train, val)`; `val` takes `round(fraction·N)` samples.
    pub fn split_train_val(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} outside [0, 1)"
            )));
        }
        let n_val = (val_fraction * self.len() as f64).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return Err(Error::Config(format!(
                "cannot split {} samples at fraction {val_fraction}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (val_idx, train_idx) = idx.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let (xt, yt) = self.batch(&train_idx)?;
        let (xv, yv) = self.batch(&val_idx)?;
        let train = Dataset::new(xt, yt, self.classes, Split::Train)?;
        let mut val = Dataset::new(xv, yv, self.classes, Split::Val)?;
        val.normalization = train.normalization;
        Ok((train, val))
    }
}

fn channel_stats(images: &Tensor) -> Normalization {
    let (n, hw) = (images.shape()[0], images.shape()[2] * images.shape()[3]);
    let mut mean = [0.0f32; 3];
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for i in 0..n {
            let start = (i * 3 + c) * hw;
            for &v in &images.data()[start..start + hw] {
                s += v as f64;
                s2 += v as f64 * v as f64;
            }
        }
        let count = (n * hw) as f64;
        let m = s / count;
        mean[c] = m as f32;
        std[c] = (s2 / count - m * m).max(0.0).sqrt() as f32;
    }
    Normalization { mean, std }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses CIFAR-10 binary records from memory. `path` only labels errors.
pub fn parse_cifar10(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(format_err(
            path,
            format!(
                "{} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(format_err(
                path,
                format!("record {r} has label byte {}", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&v| v as f32 / 255.0));
    }
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    parse_cifar10(&fs::read(path)?, path, split)
}

/// Batch files of the standard binary distribution for `split`.
pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        Split::Train | Split::Val => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
    }
}

/// Loads and concatenates the batch files of `split`, optionally keeping only the first `limit` records.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for file in cifar10_files(dir, split) {
        let chunk = fs::read(&file).map_err(|e| format_err(&file, e.to_string()))?;
        if chunk.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(format_err(
                &file,
                format!(
                    "{} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
                    chunk.len()
                ),
            ));
        }
        bytes.extend_from_slice(&chunk);
        if limit.is_some_and(|l| bytes.len() >= l * CIFAR_RECORD_BYTES) {
            break;
        }
    }
    if let Some(l) = limit {
        bytes.truncate(l * CIFAR_RECORD_BYTES);
    }
    parse_cifar10(&bytes, dir, split)
}

/// Parameters of the synthetic blob generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_per_class: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Scales all within-class variation; 0 makes every image of a class identical.
    pub noise: f32,
}

struct BlobClass {
    cx: f32,
    cy: f32,
    sigma: f32,
    color: [f32; 3],
}

/// Fully saturated color at `hue ∈ [0, 1)`.
fn hue_color(hue: f32) -> [f32; 3] {
    let channel = |offset: f32| {
        let h = (hue + offset).rem_euclid(1.0) * 6.0;
        (2.0 - (h - 2.0).abs()).clamp(0.0, 1.0) * 0.9
    };
    [channel(0.0), channel(2.0 / 3.0), channel(1.0 / 3.0)]
}

/// Class-conditional Gaussian blobs on a dark background, plus pixel noise and
/// center jitter proportional to `noise`. Class colors are evenly spaced in hue.
/// Samples are ordered class by class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.n_per_class == 0 || spec.image_size == 0 {
        return Err(Error::Config(
            "synthetic data needs samples and a positive image size".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise {} must be finite and nonnegative",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size as f32;
    let blobs: Vec<BlobClass> = (0..spec.classes)
        .map(|c| BlobClass {
            cx: rng.random_range(0.2..0.8) * s,
            cy: rng.random_range(0.2..0.8) * s,
            sigma: rng.random_range(0.08..0.2) * s,
            color: hue_color(c as f32 / spec.classes as f32),
        })
        .collect();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let side = spec.image_size;
    let plane = side * side;
    let n = spec.classes * spec.n_per_class;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, blob) in blobs.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let jitter = spec.noise * 0.1 * s;
            let cx = blob.cx + jitter * normal.sample(&mut rng);
            let cy = blob.cy + jitter * normal.sample(&mut rng);
            for color in blob.color {
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        let v = 0.1 + color * (-d2 / (2.0 * blob.sigma * blob.sigma)).exp();
                        let v = v + spec.noise * 0.1 * normal.sample(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(&[n, 3, side, side], data)?;
    Dataset::new(images, labels, spec.classes, Split::Train)
}

/// Equal-width histogram over `[min, max]` of a set of values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.counts.len())
            .map(|i| self.lo + (i as f64 + 0.5) * w)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the fullest bin, lowest index on ties.
    pub fn mode_bin(&self) -> usize {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        self.counts.iter().position(|&c| c == max).unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,count\n");
        for (c, n) in self.centers().iter().zip(&self.counts) {
            s.push_str(&format!("{c},{n}\n"));
        }
        s
    }
}

/// Bins `values` into `bins` equal-width bins over their range. The maximum
/// lands in the last bin. If every value is equal the range is widened to
/// `value ± 0.5` so all of them fall into the middle bin.
pub fn histogram(values: &[f32], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("histogram of an empty tensor".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram"));
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let (lo, hi) = if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    };
    let mut counts = vec![0u64; bins];
    let w = (hi - lo) / bins as f64;
    for &v in values {
        let i = (((v as f64 - lo) / w).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}
