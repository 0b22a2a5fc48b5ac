//! Datasets: CIFAR binary ingestion, synthetic tasks, stratified splits,
//! per-channel standardization and seeded batch streams.
//!
//! CIFAR-10 records are 3073 bytes (label, 3072 pixels); CIFAR-100 records
//! are 3074 bytes (coarse label, fine label, 3072 pixels). Pixels are stored
//! channel-major: 1024 red, 1024 green, then 1024 blue bytes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CROP_PAD: usize = 4;

/// Mixes several integers into one generator seed (splitmix64 chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(state << 6);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR_PIXELS + 1,
            CifarVariant::Cifar100 => CIFAR_PIXELS + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => &["train.bin"],
        }
    }

    pub fn test_file(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "test_batch.bin",
            CifarVariant::Cifar100 => "test.bin",
        }
    }
}

/// Per-channel mean and standard deviation of the raw inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    /// Index of each sample in the collection it was drawn from.
    source_index: Vec<usize>,
    stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "dataset: {} values do not hold {} samples of shape {:?}",
                inputs.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "dataset: label {bad} out of range for {num_classes} classes"
            )));
        }
        let n = labels.len();
        Ok(Self {
            inputs,
            sample_shape,
            labels,
            num_classes,
            source_index: (0..n).collect(),
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source_index(&self) -> &[usize] {
        &self.source_index
    }

    /// Standardization statistics, once applied.
    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples `indices` (in order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.sample_len();
        let mut inputs = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Self {
            inputs,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            source_index: indices.iter().map(|&i| self.source_index[i]).collect(),
            stats: self.stats.clone(),
        }
    }

    /// A `[n, ...sample_shape]` tensor of the given samples.
    pub fn tensor<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, data).expect("sample layout is consistent")
    }

    fn channels(&self) -> (usize, usize) {
        if self.sample_shape.len() >= 2 {
            let c = self.sample_shape[0];
            (c, self.sample_len() / c)
        } else {
            (self.sample_len(), 1)
        }
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> ChannelStats {
        let (c, inner) = self.channels();
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let per = self.sample_len();
        for s in 0..self.len() {
            let x = &self.inputs[s * per..(s + 1) * per];
            for ch in 0..c {
                for &v in &x[ch * inner..(ch + 1) * inner] {
                    mean[ch] += v as f64;
                }
            }
        }
        let count = (self.len() * inner) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for s in 0..self.len() {
            let x = &self.inputs[s * per..(s + 1) * per];
            for ch in 0..c {
                for &v in &x[ch * inner..(ch + 1) * inner] {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq.iter().map(|&q| (q / count).sqrt()).collect();
        ChannelStats { mean, std }
    }

    fn apply_stats(&mut self, stats: &ChannelStats) {
        let (c, inner) = self.channels();
        let per = self.sample_len();
        for s in 0..self.len() {
            let x = &mut self.inputs[s * per..(s + 1) * per];
            for ch in 0..c {
                let std = if stats.std[ch] > 0.0 { stats.std[ch] } else { 1.0 };
                for v in &mut x[ch * inner..(ch + 1) * inner] {
                    *v = ((*v as f64 - stats.mean[ch]) / std) as f32;
                }
            }
        }
        self.stats = Some(stats.clone());
    }

    /// Hex SHA-256 over shape, labels and input bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.sample_shape {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &v in &self.inputs {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Disjoint train and held-out splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Standardizes both splits with per-channel statistics of the train split.
    pub fn standardize(&mut self) {
        let stats = self.train.channel_stats();
        self.train.apply_stats(&stats);
        self.test.apply_stats(&stats);
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.train.checksum());
        h.update(self.test.checksum());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Raw pixels (channel-major bytes) and labels of one CIFAR binary file.
#[derive(Clone, Debug, PartialEq)]
pub struct CifarRecords {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

pub fn read_cifar_file(path: &Path, variant: CifarVariant) -> Result<CifarRecords> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!(
                "size {} is not a multiple of the {rec}-byte record length",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(rec) {
        let (label, px) = match variant {
            CifarVariant::Cifar10 => (record[0] as usize, &record[1..]),
            CifarVariant::Cifar100 => (record[1] as usize, &record[2..]),
        };
        if label >= variant.num_classes() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend_from_slice(px);
    }
    Ok(CifarRecords { pixels, labels })
}

fn records_to_dataset(records: CifarRecords, variant: CifarVariant) -> Dataset {
    let inputs = records.pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(inputs, vec![3, 32, 32], records.labels, variant.num_classes())
        .expect("cifar records are well formed")
}

/// Per-class caps for desk-scale subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subset {
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub seed: u64,
}

/// Seeded per-class sample of at most `cap` indices per class, in storage order.
pub fn stratified_indices(labels: &[usize], num_classes: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut picked = Vec::new();
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        picked.extend(idx);
    }
    picked.sort_unstable();
    picked
}

/// Loads the binary CIFAR files under `dir`, scales pixels to [0,1] and
/// standardizes with train-split channel statistics.
pub fn load_cifar(dir: &Path, variant: CifarVariant, subset: Option<Subset>) -> Result<Splits> {
    let mut train = CifarRecords {
        pixels: Vec::new(),
        labels: Vec::new(),
    };
    for name in variant.train_files() {
        let part = read_cifar_file(&dir.join(name), variant)?;
        train.pixels.extend(part.pixels);
        train.labels.extend(part.labels);
    }
    let test = read_cifar_file(&dir.join(variant.test_file()), variant)?;
    let mut train = records_to_dataset(train, variant);
    let mut test = records_to_dataset(test, variant);
    if let Some(sub) = subset {
        let m = variant.num_classes();
        if let Some(cap) = sub.train_per_class {
            train = train.subset(&stratified_indices(&train.labels, m, cap, sub.seed));
        }
        if let Some(cap) = sub.test_per_class {
            let seed = derive_seed(&[sub.seed, 1]);
            test = test.subset(&stratified_indices(&test.labels, m, cap, seed));
        }
    }
    let mut splits = Splits { train, test };
    splits.standardize();
    Ok(splits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    GaussianBlobs,
    TwoMoonsGrid,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs),
            "two_moons_grid" => Ok(SyntheticKind::TwoMoonsGrid),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::GaussianBlobs => "gaussian_blobs",
            SyntheticKind::TwoMoonsGrid => "two_moons_grid",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub num_classes: usize,
    pub noise: f64,
    pub seed: u64,
    /// Per-sample shape; blobs may be any shape, moons must be `[2]`.
    pub shape: Vec<usize>,
}

/// Class-balanced synthetic dataset; the first `n % M` classes get one extra sample.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let m = spec.num_classes;
    if m < 2 || spec.n_samples < m {
        return Err(Error::invalid(
            "synthetic: need num_classes >= 2 and at least one sample per class",
        ));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::invalid("synthetic: noise must be >= 0"));
    }
    let dim: usize = spec.shape.iter().product();
    if dim == 0 {
        return Err(Error::invalid("synthetic: empty sample shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.n_samples).map(|i| i % m).collect();
    let mut inputs = Vec::with_capacity(spec.n_samples * dim);
    match spec.kind {
        SyntheticKind::GaussianBlobs => {
            let centers: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    (0..dim)
                        .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            for &l in &labels {
                for &c in &centers[l] {
                    let e: f64 = rng.sample(StandardNormal);
                    inputs.push((c + spec.noise * e) as f32);
                }
            }
        }
        SyntheticKind::TwoMoonsGrid => {
            if spec.shape != [2] {
                return Err(Error::invalid("synthetic: two_moons_grid needs shape [2]"));
            }
            let cols = (m as f64).sqrt().ceil() as usize;
            for &l in &labels {
                let (cx, cy) = ((l % cols) as f64 * 3.0, (l / cols) as f64 * 3.0);
                let t = rng.gen_range(0.0..std::f64::consts::PI);
                let flip = if l % 2 == 0 { 1.0 } else { -1.0 };
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                inputs.push((cx + t.cos() + spec.noise * ex) as f32);
                inputs.push((cy + flip * t.sin() * 0.5 + spec.noise * ey) as f32);
            }
        }
    }
    Dataset::new(inputs, spec.shape.clone(), labels, m)
}

/// Seeded stratified split; each class sends `round(n_c * test_fraction)` samples to test.
pub fn split_stratified(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test fraction must be in [0,1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Splits {
        train: ds.subset(&train),
        test: ds.subset(&test),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Zero-pad by 4, random 32×32 crop, random horizontal flip.
    CropFlip,
}

impl FromStr for Augment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "crop_flip" => Ok(Augment::CropFlip),
            other => Err(Error::invalid(format!("unknown augmentation `{other}`"))),
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::None => "none",
            Augment::CropFlip => "crop_flip",
        })
    }
}

/// Crop offsets and flip drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropFlip {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl CropFlip {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        Self {
            dy: rng.gen_range(0..=2 * CROP_PAD),
            dx: rng.gen_range(0..=2 * CROP_PAD),
            flip: rng.gen(),
        }
    }

    /// Crops `[C, H, W]` out of the zero-padded sample and optionally mirrors it.
    pub fn apply(&self, sample: &[f32], shape: &[usize], out: &mut [f32]) {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + self.dy) as isize - CROP_PAD as isize;
                for x in 0..w {
                    let ox = if self.flip { w - 1 - x } else { x };
                    let sx = (x + self.dx) as isize - CROP_PAD as isize;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        sample[(ch * h + sy as usize) * w + sx as usize]
                    };
                    out[(ch * h + y) * w + ox] = v;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    /// Positions of the samples within the dataset.
    pub indices: Vec<usize>,
}

/// Deterministic batch stream over one epoch.
pub struct Batches<'a, T> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Augment,
    seed: u64,
    epoch: u64,
    _marker: std::marker::PhantomData<T>,
}

/// Batches of one epoch. `shuffle` seeds the order; `None` keeps storage order.
/// Augmentation draws from a generator seeded by `(seed, epoch, sample index)`.
pub fn batches<T: Scalar>(
    ds: &Dataset,
    batch_size: usize,
    shuffle: Option<u64>,
    augment: Augment,
    epoch: usize,
) -> Batches<'_, T> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64]));
        order.shuffle(&mut rng);
    }
    Batches {
        ds,
        order,
        pos: 0,
        batch_size,
        augment,
        seed: shuffle.unwrap_or(0),
        epoch: epoch as u64,
        _marker: std::marker::PhantomData,
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let shape = self.ds.sample_shape();
        let augment = self.augment == Augment::CropFlip && shape.len() == 3;
        let per = self.ds.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut scratch = vec![0f32; per];
        for &i in &indices {
            let sample = if augment {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    self.seed,
                    self.epoch,
                    self.ds.source_index[i] as u64,
                ]));
                CropFlip::draw(&mut rng).apply(self.ds.sample(i), shape, &mut scratch);
                &scratch[..]
            } else {
                self.ds.sample(i)
            };
            data.extend(sample.iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut tshape = vec![indices.len()];
        tshape.extend(shape);
        Some(Batch {
            inputs: Tensor::new(tshape, data).expect("batch layout"),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}
