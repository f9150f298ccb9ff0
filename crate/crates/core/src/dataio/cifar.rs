//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! A CIFAR-10 record is 1 label byte followed by 3072 pixel bytes (R, G, B
//! planes of 32x32, row-major); CIFAR-100 records carry a coarse and a fine
//! label byte before the pixels.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR10_RECORD: usize = 1 + IMAGE_BYTES;
pub const CIFAR100_RECORD: usize = 2 + IMAGE_BYTES;
pub const RECORDS_PER_BATCH: usize = 10_000;

pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn record_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => CIFAR10_RECORD,
            CifarKind::Cifar100 => CIFAR100_RECORD,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }
}

impl std::str::FromStr for CifarKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarKind::Cifar10),
            "cifar100" => Ok(CifarKind::Cifar100),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (cifar10 or cifar100)"
            ))),
        }
    }
}

/// Images `[n, 3, h, w]` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    /// CIFAR-100 coarse labels, kept so batches can be written back verbatim.
    pub coarse_labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
            coarse_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.gather_batch(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    fn select(&self, indices: &[usize], labels: Vec<usize>, class_count: usize) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Data("selection is empty".into()));
        }
        Ok(Dataset {
            images: self.images.gather_batch(indices)?,
            labels,
            class_count,
            split: self.split,
            coarse_labels: self
                .coarse_labels
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        })
    }

    /// The first `k` images of every class, in dataset order.
    pub fn subset_per_class(&self, k: usize) -> Result<Dataset> {
        let mut taken = vec![0usize; self.class_count];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let t = &mut taken[self.labels[i]];
                *t += 1;
                *t <= k
            })
            .collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        self.select(&idx, labels, self.class_count)
    }

    /// Keeps only `classes`, relabelled `0..classes.len()` in the given order.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.len() < 2 || classes.iter().any(|&c| c >= self.class_count) {
            return Err(Error::Data(format!(
                "need at least two classes below {}",
                self.class_count
            )));
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let labels = idx
            .iter()
            .map(|&i| classes.iter().position(|&c| c == self.labels[i]).unwrap())
            .collect();
        self.select(&idx, labels, classes.len())
    }

    /// A uniformly random sample of `k` images (all if `k >= len`).
    pub fn sample(&self, k: usize, seed: u64) -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(k);
        idx.sort_unstable();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        self.select(&idx, labels, self.class_count)
    }

    /// Per-class image counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// Re-encodes as CIFAR records (pixels must lie in `[0, 1]`).
    pub fn to_cifar_bytes(&self, kind: CifarKind) -> Result<Vec<u8>> {
        let s = self.images.shape();
        if s.per_sample() != IMAGE_BYTES {
            return Err(Error::Data(format!(
                "images are {}x{}x{}, CIFAR records hold 3x32x32",
                s.c, s.h, s.w
            )));
        }
        if kind == CifarKind::Cifar100 && self.coarse_labels.is_none() {
            return Err(Error::Data("CIFAR-100 records need coarse labels".into()));
        }
        let mut out = Vec::with_capacity(self.len() * kind.record_bytes());
        for (i, &label) in self.labels.iter().enumerate() {
            if let Some(c) = &self.coarse_labels {
                out.push(c[i]);
            }
            out.push(
                u8::try_from(label)
                    .map_err(|_| Error::Data(format!("label {label} does not fit a byte")))?,
            );
            let px = &self.images.data()[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
            out.extend(
                px.iter()
                    .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
            );
        }
        Ok(out)
    }
}

/// Parses one in-memory batch. `expected_records` pins the exact size.
pub fn parse_cifar(
    bytes: &[u8],
    kind: CifarKind,
    expected_records: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let rec = kind.record_bytes();
    match expected_records {
        Some(n) if bytes.len() != n * rec => {
            return Err(Error::Format(format!(
                "expected {} bytes ({n} records of {rec}), found {}",
                n * rec,
                bytes.len()
            )));
        }
        None if bytes.is_empty() || !bytes.len().is_multiple_of(rec) => {
            return Err(Error::Format(format!(
                "size {} is not a positive multiple of the {rec}-byte record",
                bytes.len()
            )));
        }
        _ => {}
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let max_label = kind.classes() - 1;
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (label, px) = match kind {
            CifarKind::Cifar10 => (r[0], &r[1..]),
            CifarKind::Cifar100 => {
                coarse.push(r[0]);
                (r[1], &r[2..])
            }
        };
        if usize::from(label) > max_label {
            return Err(Error::Data(format!(
                "record {i}: label {label} exceeds {max_label}"
            )));
        }
        labels.push(usize::from(label));
        pixels.extend(px.iter().map(|&b| f32::from(b) / 255.0));
    }
    let images = Tensor::new(Shape::new(n, 3, 32, 32), pixels)?;
    let mut ds = Dataset::new(images, labels, kind.classes(), split)?;
    if kind == CifarKind::Cifar100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

pub fn load_cifar_file(
    path: &Path,
    kind: CifarKind,
    expected_records: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cifar(&bytes, kind, expected_records, split).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Concatenates batches parsed in parallel; any failure discards everything.
fn load_all(files: &[PathBuf], kind: CifarKind, records: usize, split: Split) -> Result<Dataset> {
    let parts: Vec<Dataset> = files
        .par_iter()
        .map(|f| load_cifar_file(f, kind, Some(records), split))
        .collect::<Result<_>>()?;
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let mut coarse: Option<Vec<u8>> = (kind == CifarKind::Cifar100).then(Vec::new);
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_data());
        if let (Some(all), Some(c)) = (coarse.as_mut(), p.coarse_labels) {
            all.extend(c);
        }
    }
    let mut ds = Dataset::new(
        Tensor::new(Shape::new(n, 3, 32, 32), pixels)?,
        labels,
        kind.classes(),
        split,
    )?;
    ds.coarse_labels = coarse;
    Ok(ds)
}

/// Accepts either the directory holding the batch files or its parent.
fn resolve_dir(dir: &Path, sub: &str, probe: &str) -> PathBuf {
    if dir.join(probe).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(sub)
    }
}

/// Official CIFAR-10 binaries: 5 train batches and 1 test batch of 10000.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir.as_ref(), "cifar-10-batches-bin", CIFAR10_TEST_FILE);
    let train: Vec<PathBuf> = CIFAR10_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let train = load_all(&train, CifarKind::Cifar10, RECORDS_PER_BATCH, Split::Train)?;
    let test = load_all(
        &[dir.join(CIFAR10_TEST_FILE)],
        CifarKind::Cifar10,
        RECORDS_PER_BATCH,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Official CIFAR-100 binaries: 50000 train and 10000 test records; fine labels.
pub fn load_cifar100(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir.as_ref(), "cifar-100-binary", CIFAR100_TEST_FILE);
    let train = load_all(
        &[dir.join(CIFAR100_TRAIN_FILE)],
        CifarKind::Cifar100,
        5 * RECORDS_PER_BATCH,
        Split::Train,
    )?;
    let test = load_all(
        &[dir.join(CIFAR100_TEST_FILE)],
        CifarKind::Cifar100,
        RECORDS_PER_BATCH,
        Split::Test,
    )?;
    Ok((train, test))
}

pub fn load_cifar(kind: CifarKind, dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    match kind {
        CifarKind::Cifar10 => load_cifar10(dir),
        CifarKind::Cifar100 => load_cifar100(dir),
    }
}

/// Per-channel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardizes each channel; computes the statistics from `ds` unless given
/// (pass the training statistics when normalizing a test split).
pub fn normalize_dataset(ds: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats)> {
    let s = ds.images.shape();
    let stats = match stats {
        Some(st) => {
            if st.mean.len() != s.c || st.std.len() != s.c {
                return Err(Error::Dimension(format!(
                    "stats cover {} channels, images have {}",
                    st.mean.len(),
                    s.c
                )));
            }
            st.clone()
        }
        None => {
            let count = (s.n * s.plane()) as f64;
            let mut mean = vec![0.0; s.c];
            let mut std = vec![0.0; s.c];
            for c in 0..s.c {
                let sum: f64 = (0..s.n)
                    .flat_map(|b| ds.images.plane(b, c))
                    .map(|&v| f64::from(v))
                    .sum();
                mean[c] = sum / count;
                let sq: f64 = (0..s.n)
                    .flat_map(|b| ds.images.plane(b, c))
                    .map(|&v| (f64::from(v) - mean[c]).powi(2))
                    .sum();
                std[c] = (sq / count).sqrt();
            }
            NormStats { mean, std }
        }
    };
    if let Some(c) = stats.std.iter().position(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Numeric(format!(
            "channel {c} has zero standard deviation"
        )));
    }
    let mut out = ds.clone();
    for b in 0..s.n {
        for c in 0..s.c {
            let (m, sd) = (stats.mean[c], stats.std[c]);
            for v in out.images.plane_mut(b, c) {
                *v = ((f64::from(*v) - m) / sd) as f32;
            }
        }
    }
    Ok((out, stats))
}

/// Inverse of [`normalize_dataset`].
pub fn denormalize(images: &Tensor<f32>, stats: &NormStats) -> Tensor<f32> {
    let s = images.shape();
    let mut out = images.clone();
    for b in 0..s.n {
        for c in 0..s.c {
            for v in out.plane_mut(b, c) {
                *v = (f64::from(*v) * stats.std[c] + stats.mean[c]) as f32;
            }
        }
    }
    out
}
