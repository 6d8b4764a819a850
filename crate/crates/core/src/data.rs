//! Datasets: IDX and CIFAR binary readers plus small synthetic generators.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Label, Sample};
use crate::rng::SplitMix64;
use rand::Rng;
use rand_distr::StandardNormal;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const IDX_CLASSES: u8 = 10;

/// Samples with a train/test split. The first `train_len` samples are the
/// training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub samples: Vec<Sample>,
    pub train_len: usize,
    /// 0 for regression data.
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DatasetHandle {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let train_len = samples.len();
        Self::with_split(samples, train_len, num_classes)
    }

    pub fn with_split(samples: Vec<Sample>, train_len: usize, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        if train_len == 0 || train_len > samples.len() {
            return Err(Error::config(format!(
                "train split {train_len} outside 1..={}",
                samples.len()
            )));
        }
        let feature_dim = samples[0].features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: s.features.len(),
                });
            }
            if let Label::Class(c) = s.label {
                if c >= num_classes {
                    return Err(Error::format(format!(
                        "sample {i} has label {c}, expected < {num_classes}"
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            train_len,
            num_classes,
            feature_dim,
        })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.train_len]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.train_len..]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Group ids of the training samples: the class for classification
    /// data, and for regression data the index of each distinct target in
    /// order of first appearance.
    pub fn labels(&self) -> Vec<usize> {
        let mut seen: Vec<f64> = Vec::new();
        self.train()
            .iter()
            .map(|s| match s.label {
                Label::Class(c) => c,
                Label::Value(v) => match seen.iter().position(|t| t.to_bits() == v.to_bits()) {
                    Some(k) => k,
                    None => {
                        seen.push(v);
                        seen.len() - 1
                    }
                },
            })
            .collect()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for s in &self.samples {
            if let Some(c) = s.class_id() {
                hist[c] += 1;
            }
        }
        hist
    }

    /// Keeps the first `train` training samples and the first `test` test
    /// samples.
    pub fn truncate(mut self, train: usize, test: usize) -> Result<Self> {
        let train = train.min(self.train_len);
        let test = test.min(self.samples.len() - self.train_len);
        let mut tail = self.samples.split_off(self.train_len);
        tail.truncate(test);
        self.samples.truncate(train);
        self.samples.extend(tail);
        Self::with_split(self.samples, train, self.num_classes)
    }

    /// Splits off the last `test` samples as a test set.
    pub fn hold_out(self, test: usize) -> Result<Self> {
        let train = self.samples.len().saturating_sub(test);
        Self::with_split(self.samples, train, self.num_classes)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{what}: header truncated")))
}

/// Parses an IDX image/label pair.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<DatasetHandle> {
    let magic = be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES {
        return Err(Error::format(format!("images: bad magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let pixels = rows * cols;
    let body = &images[16..];
    if body.len() != count * pixels {
        return Err(Error::format(format!(
            "images: expected {} pixel bytes, found {}",
            count * pixels,
            body.len()
        )));
    }

    let magic = be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS {
        return Err(Error::format(format!("labels: bad magic {magic:#010x}")));
    }
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if label_count != count {
        return Err(Error::format(format!("{count} images but {label_count} labels")));
    }
    let label_body = &labels[8..];
    if label_body.len() != count {
        return Err(Error::format(format!(
            "labels: expected {count} bytes, found {}",
            label_body.len()
        )));
    }

    let mut samples = Vec::with_capacity(count);
    for (i, &label) in label_body.iter().enumerate() {
        if label >= IDX_CLASSES {
            return Err(Error::format(format!(
                "label {label} at index {i} is not a digit class"
            )));
        }
        let features = body[i * pixels..(i + 1) * pixels]
            .iter()
            .map(|&v| f64::from(v) / 255.0)
            .collect();
        samples.push(Sample::class(features, usize::from(label)));
    }
    DatasetHandle::new(samples, usize::from(IDX_CLASSES))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<DatasetHandle> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?)
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Parses a CIFAR binary batch: records of one label byte (two for
/// CIFAR-100, whose fine label comes second) followed by 3072 pixel bytes.
pub fn parse_cifar_batch(bytes: &[u8], classes: usize) -> Result<DatasetHandle> {
    let label_bytes = match classes {
        10 => 1,
        100 => 2,
        _ => return Err(Error::config(format!("CIFAR has 10 or 100 classes, not {classes}"))),
    };
    let record = label_bytes + CIFAR_PIXELS;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::format(format!(
            "CIFAR batch length {} is not a multiple of {record}",
            bytes.len()
        )));
    }
    let samples = bytes
        .chunks(record)
        .map(|r| {
            let label = usize::from(r[label_bytes - 1]);
            let features = r[label_bytes..].iter().map(|&v| f64::from(v) / 255.0).collect();
            Sample::class(features, label)
        })
        .collect();
    DatasetHandle::new(samples, classes)
}

pub fn load_cifar_batch(path: &Path, classes: usize) -> Result<DatasetHandle> {
    parse_cifar_batch(&fs::read(path)?, classes)
}

/// `count` scalar targets, the first half equal to `a` and the rest to `b`.
pub fn synth_two_level(count: usize, a: f64, b: f64) -> Result<DatasetHandle> {
    if count == 0 || !count.is_multiple_of(2) {
        return Err(Error::config(format!("count must be even and positive, got {count}")));
    }
    let samples = (0..count)
        .map(|i| {
            let target = if i < count / 2 { a } else { b };
            Sample::value(Vec::new(), target)
        })
        .collect();
    DatasetHandle::new(samples, 0)
}

/// Balanced Gaussian clusters: `per_class` samples of each class around
/// random unit-scale centers, with isotropic noise `spread`.
pub fn synth_blobs(classes: usize, per_class: usize, features: usize, spread: f64, seed: u64) -> Result<DatasetHandle> {
    if classes < 2 || per_class == 0 || features == 0 {
        return Err(Error::config(
            "blobs need >= 2 classes, >= 1 sample per class and >= 1 feature",
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut samples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (class, center) in centers.iter().enumerate() {
            let features = center
                .iter()
                .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample::class(features, class));
        }
    }
    DatasetHandle::new(samples, classes)
}
