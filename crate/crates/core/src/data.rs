//! Labeled datasets: synthetic Gaussian blobs and the CIFAR-100 binary layout.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::Vector { dim } => dim,
            SampleShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            SampleShape::Vector { dim } => vec![dim],
            SampleShape::Image { channels, height, width } => vec![channels, height, width],
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, SampleShape::Image { .. })
    }
}

/// Samples stored contiguously, one `shape.len()` slice per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    shape: SampleShape,
    samples: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: SplitTag,
}

impl LabeledDataset {
    pub fn new(shape: SampleShape, samples: Vec<f64>, labels: Vec<usize>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if samples.len() != labels.len() * shape.len() {
            return Err(Error::Shape(format!(
                "{} values for {} samples of size {}",
                samples.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Constraint(format!("label {bad} ≥ num_classes {num_classes}")));
        }
        Ok(Self { shape, samples, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> &SampleShape {
        &self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.shape.len();
        &self.samples[i * w..(i + 1) * w]
    }

    /// `[idx.len(), ...shape]` batch plus labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend(self.shape.dims());
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_vec(&shape, data).expect("contiguous samples"), labels)
    }

    /// Per-class sample indices in ascending order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[y].push(i);
        }
        pools
    }

    /// Replicates single-channel images to `channels` planes.
    pub fn with_channels(self, channels: usize) -> Result<Self> {
        match self.shape {
            SampleShape::Image { channels: 1, height, width } if channels > 1 => {
                let plane = height * width;
                let mut samples = Vec::with_capacity(self.samples.len() * channels);
                for s in self.samples.chunks(plane) {
                    for _ in 0..channels {
                        samples.extend_from_slice(s);
                    }
                }
                let shape = SampleShape::Image { channels, height, width };
                Self::new(shape, samples, self.labels, self.num_classes, self.split)
            }
            SampleShape::Image { channels: c, .. } if c == channels => Ok(self),
            _ => Err(Error::Config(format!("cannot map {:?} to {channels} channels", self.shape))),
        }
    }
}

/// Isotropic Gaussian clusters around random class centers, affinely
/// rescaled (one global map for train and test) into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianBlobs {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers.
    pub center_std: f64,
    /// Within-class standard deviation.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GaussianBlobs {
    fn default() -> Self {
        Self { num_classes: 100, dim: 16, train_per_class: 500, test_per_class: 100, center_std: 1.0, noise_std: 0.5, seed: 0 }
    }
}

impl GaussianBlobs {
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Config("blobs need at least one class and dimension".into()));
        }
        let mut rng = rng::stream(self.seed, "blobs", &[]);
        let normal = |rng: &mut rng::Stream| -> f64 { StandardNormal.sample(rng) };
        let centers: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| (0..self.dim).map(|_| self.center_std * normal(&mut rng)).collect())
            .collect();
        let mut draw = |per_class: usize| {
            let mut values = Vec::with_capacity(per_class * self.num_classes * self.dim);
            let mut labels = Vec::with_capacity(per_class * self.num_classes);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..per_class {
                    values.extend(center.iter().map(|m| m + self.noise_std * normal(&mut rng)));
                    labels.push(c);
                }
            }
            (values, labels)
        };
        let (mut train, train_y) = draw(self.train_per_class);
        let (mut test, test_y) = draw(self.test_per_class);
        let lo = train.iter().chain(&test).copied().fold(f64::INFINITY, f64::min);
        let hi = train.iter().chain(&test).copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in train.iter_mut().chain(test.iter_mut()) {
            *v = (*v - lo) / span;
        }
        let shape = SampleShape::Vector { dim: self.dim };
        Ok((
            LabeledDataset::new(shape.clone(), train, train_y, self.num_classes, SplitTag::Train)?,
            LabeledDataset::new(shape, test, test_y, self.num_classes, SplitTag::Test)?,
        ))
    }
}

pub const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 2 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Reads a CIFAR-100 binary file (`train.bin` / `test.bin`): records of
/// coarse label, fine label and 3072 channel-major pixel bytes. Fine labels
/// are used; pixels are scaled to `[0, 1]`.
pub fn load_cifar100(path: impl AsRef<Path>, split: SplitTag) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut samples = Vec::with_capacity(n * (CIFAR_RECORD - 2));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[1]));
        samples.extend(rec[2..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let shape = SampleShape::Image { channels: 3, height: CIFAR_SIDE, width: CIFAR_SIDE };
    LabeledDataset::new(shape, samples, labels, 100, split).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Where a train/test pair comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs(GaussianBlobs),
    Cifar100 { train: PathBuf, test: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSource::Blobs(b) => b.generate(),
            DatasetSource::Cifar100 { train, test } => {
                Ok((load_cifar100(train, SplitTag::Train)?, load_cifar100(test, SplitTag::Test)?))
            }
        }
    }
}

/// Parses `blobs[:key=value,...]` (keys: classes, dim, train, test,
/// center_std, noise_std, seed) or a `train.bin` path whose sibling
/// `test.bin` holds the test split.
impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = s.trim();
        let Some(rest) = spec.strip_prefix("blobs").or_else(|| spec.strip_prefix("synthetic")) else {
            let train = PathBuf::from(spec);
            let test = train.with_file_name("test.bin");
            return Ok(DatasetSource::Cifar100 { train, test });
        };
        let mut b = GaussianBlobs::default();
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in dataset spec, got {kv:?}")))?;
            let bad = |_| Error::Config(format!("bad value for {k}: {v:?}"));
            match k {
                "classes" => b.num_classes = v.parse().map_err(bad)?,
                "dim" => b.dim = v.parse().map_err(bad)?,
                "train" => b.train_per_class = v.parse().map_err(bad)?,
                "test" => b.test_per_class = v.parse().map_err(bad)?,
                "seed" => b.seed = v.parse().map_err(bad)?,
                "center_std" => b.center_std = v.parse().map_err(|_| Error::Config(format!("bad {k}")))?,
                "noise_std" => b.noise_std = v.parse().map_err(|_| Error::Config(format!("bad {k}")))?,
                _ => return Err(Error::Config(format!("unknown dataset key {k:?}"))),
            }
        }
        Ok(DatasetSource::Blobs(b))
    }
}
