//! Real data providers, the learnable synthetic dataset, and class-wise sampling.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persistence;
use crate::scalar::Scalar;
use crate::seeding::{rng_for, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization, fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled images `[M, C, H, W]` with per-class index lists.
#[derive(Debug, Clone, PartialEq)]
pub struct RealDataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_indices: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealSplits<T> {
    pub train: RealDataset<T>,
    pub test: RealDataset<T>,
}

/// Where real data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealSource {
    /// Isotropic Gaussian clusters with class means `separation` apart on average.
    Gaussians {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        shape: [usize; 3],
        separation: f64,
        seed: u64,
    },
    /// Text grid file: one sample per line, `label p0 … p63`, `#` comments.
    Digits8x8 { path: PathBuf },
    /// A condensed-dataset file; images are labelled by their class slot.
    RawTensorFile { path: PathBuf },
}

impl<T: Scalar> RealDataset<T> {
    fn from_parts(
        images: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        normalization: Normalization,
    ) -> Result<Self> {
        let mut class_indices = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Data(format!("label {y} outside 0..{num_classes}")));
            }
            class_indices[y].push(i);
        }
        if let Some(c) = class_indices.iter().position(|v| v.is_empty()) {
            return Err(Error::Data(format!(
                "class {c} has no samples in {split:?} split"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_indices,
            num_classes,
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

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[T] {
        let rl = self.images.row_len();
        &self.images.data()[i * rl..(i + 1) * rl]
    }

    /// Copies the listed samples into one `[len, C, H, W]` batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let rl = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * rl);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(&[indices.len(), c, h, w], data).expect("gather shape")
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let idx = &self.class_indices[class];
        let rl = self.images.row_len();
        let mut mean = vec![0.0; rl];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(self.image(i)) {
                *m += v.to_f64_lossy();
            }
        }
        mean.iter_mut().for_each(|m| *m /= idx.len() as f64);
        mean
    }
}

fn fit_normalization<T: Scalar>(images: &Tensor<T>) -> Normalization {
    let s = images.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for v in &images.data()[base..base + plane] {
                let v = v.to_f64_lossy();
                sum += v;
                sq += v * v;
            }
        }
        let cnt = (n * plane) as f64;
        mean[ch] = sum / cnt;
        let var = (sq / cnt - mean[ch] * mean[ch]).max(0.0);
        std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    Normalization { mean, std }
}

fn apply_normalization<T: Scalar>(images: &mut Tensor<T>, norm: &Normalization) {
    let s = images.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    for (k, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
        let ch = k % c;
        let (m, sd) = (norm.mean[ch], norm.std[ch]);
        for v in chunk {
            *v = T::from_f64_lossy((v.to_f64_lossy() - m) / sd);
        }
    }
}

/// Normalizes both splits with statistics of the train split.
fn finish<T: Scalar>(
    mut train_x: Tensor<T>,
    train_y: Vec<usize>,
    mut test_x: Tensor<T>,
    test_y: Vec<usize>,
    num_classes: usize,
) -> Result<RealSplits<T>> {
    let norm = fit_normalization(&train_x);
    apply_normalization(&mut train_x, &norm);
    apply_normalization(&mut test_x, &norm);
    Ok(RealSplits {
        train: RealDataset::from_parts(train_x, train_y, num_classes, Split::Train, norm.clone())?,
        test: RealDataset::from_parts(test_x, test_y, num_classes, Split::Test, norm)?,
    })
}

/// Loads (or generates) real data and normalizes it per channel.
pub fn load_real<T: Scalar>(source: &RealSource) -> Result<RealSplits<T>> {
    match source {
        RealSource::Gaussians {
            classes,
            per_class,
            test_per_class,
            shape,
            separation,
            seed,
        } => gaussians(
            *classes,
            *per_class,
            *test_per_class,
            *shape,
            *separation,
            *seed,
        ),
        RealSource::Digits8x8 { path } => digits8x8(path),
        RealSource::RawTensorFile { path } => raw_tensor_file(path),
    }
}

fn gaussians<T: Scalar>(
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    shape: [usize; 3],
    separation: f64,
    seed: u64,
) -> Result<RealSplits<T>> {
    if classes == 0 || per_class == 0 || test_per_class == 0 {
        return Err(Error::Data(
            "gaussians: classes, per_class and test_per_class must be positive".into(),
        ));
    }
    let d: usize = shape.iter().product();
    let mut rng = rng_for(seed, Stream::Gaussians, 0);
    // E|μ_a − μ_b| ≈ s·√(2d) for μ ~ N(0, s²I).
    let s = separation / (2.0 * d as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect()
        })
        .collect();
    let mut draw = |count: usize| -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(classes * count * d);
        let mut labels = Vec::with_capacity(classes * count);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..count {
                for &m in mu {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(T::from_f64_lossy(m + z));
                }
                labels.push(c);
            }
        }
        Ok((
            Tensor::new(&[classes * count, shape[0], shape[1], shape[2]], data)?,
            labels,
        ))
    };
    let (train_x, train_y) = draw(per_class)?;
    let (test_x, test_y) = draw(test_per_class)?;
    finish(train_x, train_y, test_x, test_y, classes)
}

/// Every fifth sample of each class (in file order) goes to the test split.
fn is_test_slot(rank_in_class: usize) -> bool {
    rank_in_class % 5 == 4
}

fn split_by_class<T: Scalar>(
    images: &[Vec<T>],
    labels: &[usize],
    num_classes: usize,
    shape: [usize; 3],
) -> Result<RealSplits<T>> {
    let mut seen = vec![0usize; num_classes];
    let (mut trx, mut try_, mut tex, mut tey) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (img, &y) in images.iter().zip(labels) {
        if is_test_slot(seen[y]) {
            tex.extend_from_slice(img);
            tey.push(y);
        } else {
            trx.extend_from_slice(img);
            try_.push(y);
        }
        seen[y] += 1;
    }
    let [c, h, w] = shape;
    let train_x = Tensor::new(&[try_.len(), c, h, w], trx)?;
    let test_x = Tensor::new(&[tey.len(), c, h, w], tex)?;
    finish(train_x, try_, test_x, tey, num_classes)
}

fn digits8x8<T: Scalar>(path: &Path) -> Result<RealSplits<T>> {
    let err = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("line {}: {e}", lineno + 1)))?;
        if nums.len() != 65 {
            return Err(err(format!(
                "line {}: expected a label and 64 pixels, found {} values",
                lineno + 1,
                nums.len()
            )));
        }
        let label = nums[0];
        if label < 0.0 || label.fract() != 0.0 || label > 9.0 {
            return Err(err(format!("line {}: bad label {label}", lineno + 1)));
        }
        labels.push(label as usize);
        images.push(
            nums[1..]
                .iter()
                .map(|&v| T::from_f64_lossy(v))
                .collect::<Vec<T>>(),
        );
    }
    if labels.is_empty() {
        return Err(err("no samples".into()));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    split_by_class(&images, &labels, classes, [1, 8, 8]).map_err(|e| err(e.to_string()))
}

fn raw_tensor_file<T: Scalar>(path: &Path) -> Result<RealSplits<T>> {
    let ds = persistence::load::<T>(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (batch, labels) = ds.to_batch();
    let rl = batch.row_len();
    let images: Vec<Vec<T>> = batch.data().chunks(rl).map(|c| c.to_vec()).collect();
    split_by_class(&images, &labels, ds.classes, ds.image_shape)
}

/// How to initialize synthetic images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    RandomReal,
    Noise,
}

/// The learnable condensed dataset `[K, N, C, H, W]`.
///
/// Within each class the image index is the subset rank: the prefix subset
/// `S[n]` is the first `n` images of every class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset<T> {
    pub images: Tensor<T>,
    pub classes: usize,
    pub ipc: usize,
    pub image_shape: [usize; 3],
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn new(images: Tensor<T>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 5 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape(
                "synthetic_dataset",
                format!("expected non-empty [K, N, C, H, W], got {s:?}"),
            ));
        }
        Ok(Self {
            classes: s[0],
            ipc: s[1],
            image_shape: [s[2], s[3], s[4]],
            images,
        })
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    fn class_range(&self, class: usize) -> std::ops::Range<usize> {
        let per = self.ipc * self.image_len();
        class * per..(class + 1) * per
    }

    /// All `N` images of `class` as `[N, C, H, W]`.
    pub fn class_block(&self, class: usize) -> Tensor<T> {
        let [c, h, w] = self.image_shape;
        Tensor::new(
            &[self.ipc, c, h, w],
            self.images.data()[self.class_range(class)].to_vec(),
        )
        .expect("class block shape")
    }

    pub fn class_block_data(&self, class: usize) -> &[T] {
        &self.images.data()[self.class_range(class)]
    }

    pub fn class_block_data_mut(&mut self, class: usize) -> &mut [T] {
        let r = self.class_range(class);
        &mut self.images.data_mut()[r]
    }

    pub fn image(&self, class: usize, i: usize) -> &[T] {
        let il = self.image_len();
        &self.class_block_data(class)[i * il..(i + 1) * il]
    }

    pub fn subset(&self, n: usize) -> Result<SubsetView<'_, T>> {
        self.check_subset(n)?;
        Ok(SubsetView { ds: self, n })
    }

    pub fn subset_mut(&mut self, n: usize) -> Result<SubsetViewMut<'_, T>> {
        self.check_subset(n)?;
        Ok(SubsetViewMut { ds: self, n })
    }

    fn check_subset(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.ipc {
            return Err(Error::OutOfRange {
                what: "subset size",
                value: n,
                allowed: format!("1..={}", self.ipc),
            });
        }
        Ok(())
    }

    /// The whole dataset as a class-major batch `[K·N, C, H, W]` with labels.
    pub fn to_batch(&self) -> (Tensor<T>, Vec<usize>) {
        self.subset(self.ipc).expect("full subset").to_batch()
    }

    /// Bit-level digest of the images (FNV-1a over raw bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.images.data() {
            h ^= v.bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Read-only view of the prefix subset `S[n]`, borrowing the parent's storage.
#[derive(Debug, Clone, Copy)]
pub struct SubsetView<'a, T> {
    ds: &'a SyntheticDataset<T>,
    n: usize,
}

impl<'a, T: Scalar> SubsetView<'a, T> {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn parent(&self) -> &'a SyntheticDataset<T> {
        self.ds
    }

    pub fn image(&self, class: usize, i: usize) -> Result<&'a [T]> {
        if i >= self.n {
            return Err(Error::OutOfRange {
                what: "subset image index",
                value: i,
                allowed: format!("0..{}", self.n),
            });
        }
        Ok(self.ds.image(class, i))
    }

    /// `[n, C, H, W]` images of one class.
    pub fn class_batch(&self, class: usize) -> Tensor<T> {
        let [c, h, w] = self.ds.image_shape;
        let il = self.ds.image_len();
        Tensor::new(
            &[self.n, c, h, w],
            self.ds.class_block_data(class)[..self.n * il].to_vec(),
        )
        .expect("subset shape")
    }

    /// Class-major `[K·n, C, H, W]` batch with hard labels.
    pub fn to_batch(&self) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.ds.image_shape;
        let il = self.ds.image_len();
        let mut data = Vec::with_capacity(self.ds.classes * self.n * il);
        let mut labels = Vec::with_capacity(self.ds.classes * self.n);
        for k in 0..self.ds.classes {
            data.extend_from_slice(&self.ds.class_block_data(k)[..self.n * il]);
            labels.extend(std::iter::repeat_n(k, self.n));
        }
        (
            Tensor::new(&[self.ds.classes * self.n, c, h, w], data).expect("subset shape"),
            labels,
        )
    }
}

/// Mutable view of `S[n]`; writes land in the parent dataset.
#[derive(Debug)]
pub struct SubsetViewMut<'a, T> {
    ds: &'a mut SyntheticDataset<T>,
    n: usize,
}

impl<T: Scalar> SubsetViewMut<'_, T> {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn image_mut(&mut self, class: usize, i: usize) -> Result<&mut [T]> {
        if i >= self.n {
            return Err(Error::OutOfRange {
                what: "subset image index",
                value: i,
                allowed: format!("0..{}", self.n),
            });
        }
        let il = self.ds.image_len();
        Ok(&mut self.ds.class_block_data_mut(class)[i * il..(i + 1) * il])
    }
}

/// `count` distinct real indices per class, in sampled order.
pub fn random_real_indices<T: Scalar>(
    real: &RealDataset<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng_for(seed, Stream::SyntheticInit, 0);
    real.class_indices
        .iter()
        .enumerate()
        .map(|(c, pool)| {
            if pool.len() < count {
                return Err(Error::Data(format!(
                    "class {c} has {} real samples, {count} requested",
                    pool.len()
                )));
            }
            Ok(index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|j| pool[j])
                .collect())
        })
        .collect()
}

/// Synthetic dataset initialized from explicit per-class real indices.
pub fn init_from_indices<T: Scalar>(
    real: &RealDataset<T>,
    indices: &[Vec<usize>],
) -> Result<SyntheticDataset<T>> {
    let ipc = indices.first().map_or(0, Vec::len);
    if ipc == 0 || indices.len() != real.num_classes || indices.iter().any(|v| v.len() != ipc) {
        return Err(Error::Data(
            "init indices must list the same positive count for every class".into(),
        ));
    }
    let [c, h, w] = real.image_shape();
    let mut data = Vec::with_capacity(real.num_classes * ipc * c * h * w);
    for idx in indices {
        for &i in idx {
            data.extend_from_slice(real.image(i));
        }
    }
    SyntheticDataset::new(Tensor::new(&[real.num_classes, ipc, c, h, w], data)?)
}

pub fn init_synthetic<T: Scalar>(
    real: &RealDataset<T>,
    ipc: usize,
    seed: u64,
    strategy: InitStrategy,
) -> Result<SyntheticDataset<T>> {
    if ipc == 0 {
        return Err(Error::OutOfRange {
            what: "images per class",
            value: 0,
            allowed: "≥ 1".into(),
        });
    }
    match strategy {
        InitStrategy::RandomReal => init_from_indices(real, &random_real_indices(real, ipc, seed)?),
        InitStrategy::Noise => {
            let mut rng = rng_for(seed, Stream::SyntheticInit, 1);
            let [c, h, w] = real.image_shape();
            let shape = [real.num_classes, ipc, c, h, w];
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
                .collect();
            SyntheticDataset::new(Tensor::new(&shape, data)?)
        }
    }
}

/// A sampled class batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    /// Set when the class had fewer samples than requested.
    pub with_replacement: bool,
}

/// Seeded stream of real mini-batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    pub batch_size: usize,
    pub replacement_events: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, stream: Stream, batch_size: usize) -> Self {
        Self {
            rng: rng_for(seed, stream, 0),
            batch_size,
            replacement_events: 0,
        }
    }

    pub fn sample_class_batch<T: Scalar>(
        &mut self,
        real: &RealDataset<T>,
        class: usize,
    ) -> Result<ClassBatch<T>> {
        let size = self.batch_size;
        let pool = real.class_indices.get(class).ok_or(Error::OutOfRange {
            what: "class",
            value: class,
            allowed: format!("0..{}", real.num_classes),
        })?;
        let with_replacement = size > pool.len();
        let indices: Vec<usize> = if with_replacement {
            self.replacement_events += 1;
            (0..size)
                .map(|_| pool[self.rng.random_range(0..pool.len())])
                .collect()
        } else {
            index::sample(&mut self.rng, pool.len(), size)
                .into_iter()
                .map(|j| pool[j])
                .collect()
        };
        Ok(ClassBatch {
            images: real.gather(&indices),
            labels: vec![class; size],
            indices,
            with_replacement,
        })
    }

    /// Uniform batch over all classes, without replacement.
    pub fn sample_batch<T: Scalar>(&mut self, real: &RealDataset<T>) -> ClassBatch<T> {
        let size = self.batch_size.min(real.len());
        let indices: Vec<usize> = index::sample(&mut self.rng, real.len(), size).into_vec();
        ClassBatch {
            images: real.gather(&indices),
            labels: indices.iter().map(|&i| real.labels[i]).collect(),
            indices,
            with_replacement: false,
        }
    }
}
