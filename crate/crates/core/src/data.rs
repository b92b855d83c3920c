//! Datasets: IDX ingestion, synthetic generators, device partitioning, and
//! mini-batch sampling.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, BatchView, Targets};
use crate::rng::RngStream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    Format { expected: u32, found: u32 },
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    Length { needed: usize, have: usize },
    #[error("image count {images} does not match label count {labels}")]
    Consistency { images: usize, labels: usize },
    #[error("label {0} out of range")]
    Label(u8),
    #[error("cannot split {samples} samples across {devices} devices")]
    InfeasiblePartition { samples: usize, devices: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Samples as rows of `features`, with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub targets: Targets,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Array2<f64>, targets: Targets, split: Split) -> Result<Self, DataError> {
        if features.nrows() != targets.len() {
            return Err(DataError::Consistency { images: features.nrows(), labels: targets.len() });
        }
        if targets.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature".into()));
        }
        if let Targets::Classes(labels) = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
                return Err(DataError::Label(bad));
            }
        }
        Ok(Dataset { features, targets, split })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    pub fn view(&self) -> BatchView<'_> {
        BatchView { features: self.features.view(), targets: self.targets.view() }
    }

    /// Copies the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch { features: self.features.select(Axis(0), indices), targets: self.targets.select(indices) }
    }

    /// A dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { features: self.features.select(Axis(0), indices), targets: self.targets.select(indices), split: self.split }
    }

    /// Uniform random subset holding `fraction` of the samples (at least one).
    pub fn sample_fraction(&self, fraction: f64, rng: &mut RngStream) -> Dataset {
        if fraction >= 1.0 {
            return self.clone();
        }
        let keep = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        let mut idx = index::sample(rng, self.len(), keep).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// A device's local data set, as indices into a shared [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DevicePartition {
    pub device_id: usize,
    pub sample_indices: Vec<usize>,
}

impl DevicePartition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// Sorted distinct labels held by the device.
    pub fn label_set(&self, data: &Dataset) -> Vec<u8> {
        let Some(labels) = data.labels() else { return Vec::new() };
        let mut seen = [false; 256];
        for &i in &self.sample_indices {
            seen[labels[i] as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let raw = fs::read(path).map_err(io_err)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io_err)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let word = bytes.get(at..at + 4).ok_or(DataError::Length { needed: at + 4, have: bytes.len() })?;
    Ok(u32::from_be_bytes(word.try_into().expect("4 bytes")))
}

/// Parses an IDX3 image file into `(rows, cols, pixels)`, pixels row-major per image.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Format { expected: IMAGE_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + n * rows * cols;
    if bytes.len() < needed {
        return Err(DataError::Length { needed, have: bytes.len() });
    }
    Ok((n, rows, cols, &bytes[16..needed]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Format { expected: LABEL_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::Length { needed, have: bytes.len() });
    }
    Ok(&bytes[8..needed])
}

/// Builds a dataset from raw IDX image and label bytes; pixels scaled to [0, 1].
pub fn dataset_from_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::Consistency { images: n, labels: labels.len() });
    }
    let features = Array2::from_shape_vec((n, rows * cols), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("sized");
    Dataset::new(features, Targets::Classes(labels.to_vec()), split)
}

/// Loads an IDX image/label pair (raw or gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    dataset_from_idx(&images, &labels, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    #[serde(alias = "non-iid")]
    NonIid,
}

/// Splits `dataset` across `n` devices.
///
/// `Iid` shuffles and cuts into near-equal chunks (sizes differ by at most
/// one). `NonIid` uses label shards: with `2n` divisible by the class count,
/// each class is cut into `2n / classes` single-label shards and each device
/// receives two shards of different classes; otherwise samples are sorted by
/// label, cut into `2n` contiguous shards, and dealt two per device.
pub fn partition(dataset: &Dataset, n: usize, mode: PartitionMode, rng: &mut RngStream) -> Result<Vec<DevicePartition>, DataError> {
    let samples = dataset.len();
    if n == 0 || n > samples {
        return Err(DataError::InfeasiblePartition { samples, devices: n });
    }
    let groups = match (mode, dataset.labels()) {
        (PartitionMode::Iid, _) | (PartitionMode::NonIid, None) => {
            let mut idx: Vec<usize> = (0..samples).collect();
            idx.shuffle(rng);
            split_even(&idx, n)
        }
        (PartitionMode::NonIid, Some(labels)) => {
            let pure = label_pure_shards(labels, n, rng);
            match pure {
                Some(shards) => shards,
                None => {
                    if 2 * n > samples {
                        return Err(DataError::InfeasiblePartition { samples, devices: n });
                    }
                    sorted_shards(labels, n, rng)
                }
            }
        }
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(device_id, mut sample_indices)| {
            sample_indices.sort_unstable();
            DevicePartition { device_id, sample_indices }
        })
        .collect())
}

fn split_even(idx: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = idx.len() / parts;
    let extra = idx.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(idx[at..at + len].to_vec());
        at += len;
    }
    out
}

fn by_class(labels: &[u8]) -> Vec<Vec<usize>> {
    let mut classes = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        classes[l as usize].push(i);
    }
    classes
}

fn label_pure_shards(labels: &[u8], n: usize, rng: &mut RngStream) -> Option<Vec<Vec<usize>>> {
    let classes = by_class(labels);
    let shards_total = 2 * n;
    if shards_total % NUM_CLASSES != 0 {
        return None;
    }
    let per_class = shards_total / NUM_CLASSES;
    if per_class < 2 || classes.iter().any(|c| c.len() < per_class) {
        return None;
    }
    let mut shards: Vec<(u8, Vec<usize>)> = Vec::with_capacity(shards_total);
    for (label, members) in classes.iter().enumerate() {
        for chunk in split_even(members, per_class) {
            shards.push((label as u8, chunk));
        }
    }
    shards.shuffle(rng);
    // Pair shard 2k with 2k+1; repair same-class pairs by swapping with a
    // later shard that fits both slots.
    for k in 0..n {
        let (a, b) = (2 * k, 2 * k + 1);
        if shards[a].0 != shards[b].0 {
            continue;
        }
        let swap = (0..shards_total).find(|&c| {
            if c == a || c == b || shards[c].0 == shards[a].0 {
                return false;
            }
            // c's partner must not share b's class after the swap.
            let partner = c ^ 1;
            partner == b || shards[partner].0 != shards[b].0
        })?;
        shards.swap(b, swap);
    }
    Some((0..n).map(|k| [shards[2 * k].1.as_slice(), shards[2 * k + 1].1.as_slice()].concat()).collect())
}

fn sorted_shards(labels: &[u8], n: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by_key(|&i| labels[i]);
    let mut shards = split_even(&idx, 2 * n);
    shards.shuffle(rng);
    (0..n).map(|k| [shards[2 * k].as_slice(), shards[2 * k + 1].as_slice()].concat()).collect()
}

/// Synthetic generators for oracle and convergence tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SynthKind {
    /// Ten unit-variance Gaussian clusters whose means sit `separation`
    /// standard deviations from the origin along distinct directions.
    Blobs { separation: f64 },
    /// `y = w*.x + b* + noise * N(0,1)` with `x` uniform on the unit cube.
    QuadraticRegression { noise: f64 },
}

/// Ground truth of a synthetic regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Class means (for blobs) or the planted regressor (for regression) are
/// drawn from `truth_rng`; samples from `rng`. Sharing `truth_rng` seeds
/// between a train and a test call yields matching distributions.
pub fn synth_dataset_with_truth(
    kind: SynthKind,
    dims: usize,
    size: usize,
    split: Split,
    truth_rng: &mut RngStream,
    rng: &mut RngStream,
) -> Result<Dataset, DataError> {
    if size < 2 || dims == 0 {
        return Err(DataError::Invalid(format!("synthetic dataset needs size >= 2 and dims >= 1, got {size}x{dims}")));
    }
    match kind {
        SynthKind::Blobs { separation } => {
            let means = blob_means(dims, separation, truth_rng);
            let mut labels: Vec<u8> = (0..size).map(|i| (i % NUM_CLASSES) as u8).collect();
            labels.shuffle(rng);
            let mut x = Array2::<f64>::zeros((size, dims));
            for (mut row, &l) in x.outer_iter_mut().zip(&labels) {
                for (v, m) in row.iter_mut().zip(&means[l as usize]) {
                    *v = m + rng.sample::<f64, _>(StandardNormal);
                }
            }
            Dataset::new(x, Targets::Classes(labels), split)
        }
        SynthKind::QuadraticRegression { noise } => {
            let truth = regression_truth(dims, truth_rng);
            let mut x = Array2::<f64>::zeros((size, dims));
            let mut y = Vec::with_capacity(size);
            for mut row in x.outer_iter_mut() {
                row.mapv_inplace(|_| rng.random::<f64>());
                let clean: f64 = row.iter().zip(&truth.weights).map(|(a, b)| a * b).sum::<f64>() + truth.bias;
                y.push(clean + noise * rng.sample::<f64, _>(StandardNormal));
            }
            Dataset::new(x, Targets::Values(y), split)
        }
    }
}

/// Single-call variant of [`synth_dataset_with_truth`] (truth and samples from one stream).
pub fn synth_dataset(kind: SynthKind, dims: usize, size: usize, rng: &mut RngStream) -> Result<Dataset, DataError> {
    let mut truth_rng = rng.clone();
    let out = synth_dataset_with_truth(kind, dims, size, Split::Train, &mut truth_rng, rng);
    *rng = truth_rng;
    out
}

fn blob_means(dims: usize, separation: f64, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..NUM_CLASSES)
        .map(|c| {
            if dims >= NUM_CLASSES {
                let mut m = vec![0.0; dims];
                m[c] = separation;
                m
            } else {
                let dir: Vec<f64> = (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                dir.iter().map(|v| separation * v / norm).collect()
            }
        })
        .collect()
}

/// The planted regressor used by [`SynthKind::QuadraticRegression`].
pub fn regression_truth(dims: usize, rng: &mut RngStream) -> RegressionTruth {
    let weights = (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let bias = rng.sample::<f64, _>(StandardNormal);
    RegressionTruth { weights, bias }
}

/// Draws a mini-batch from the device's samples, without replacement. When
/// the partition is smaller than `batch_size` the draw falls back to sampling
/// with replacement and the returned flag is set.
pub fn sample_batch(data: &Dataset, part: &DevicePartition, batch_size: usize, rng: &mut RngStream) -> Result<(Batch, bool), DataError> {
    if batch_size == 0 || part.is_empty() {
        return Err(DataError::Invalid("batch size and partition must be non-empty".into()));
    }
    let pool = &part.sample_indices;
    if batch_size > pool.len() {
        let idx: Vec<usize> = (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        return Ok((data.batch(&idx), true));
    }
    let idx: Vec<usize> = index::sample(rng, pool.len(), batch_size).into_iter().map(|k| pool[k]).collect();
    Ok((data.batch(&idx), false))
}
