//! Training fresh networks on condensed subsets and scoring them on real test data.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::condense::{condense_from, CondensationConfig, NoObserver};
use crate::datasets::{
    init_from_indices, init_synthetic, random_real_indices, RealDataset, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::models::{init_network, Network, NetworkSpec};
use crate::optim::{MultiStepLr, Sgd};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, rng_for, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub network: NetworkSpec,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay points as fractions of `epochs`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub repeats: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn desk(network: NetworkSpec) -> Self {
        Self {
            network,
            epochs: 200,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.6, 0.8],
            gamma: 0.1,
            repeats: 3,
            batch_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidConfig(format!(
                "milestones must be fractions in [0, 1], got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Seed of repeat `r`; shared across sizes and methods so comparisons are paired.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, Stream::EvalInit, r as u64)
    }

    /// Stable digest of the configuration, as 16 hex digits.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Top-1 accuracy in percent.
pub fn accuracy<T: Scalar>(net: &Network<T>, test: &RealDataset<T>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("empty test split".into()));
    }
    let il = test.images.row_len();
    let [c, h, w] = test.image_shape();
    let mut correct = 0usize;
    for start in (0..test.len()).step_by(512) {
        let end = (start + 512).min(test.len());
        let batch = Tensor::new(
            &[end - start, c, h, w],
            test.images.data()[start * il..end * il].to_vec(),
        )?;
        correct += net
            .predict(&batch)?
            .iter()
            .zip(&test.labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / test.len() as f64)
}

/// Trains a fresh network on `images`/`labels` and scores it on `test`.
pub fn train_on_subset<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    test: &RealDataset<T>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(Network<T>, f64)> {
    cfg.validate()?;
    let rows = images.shape().first().copied().unwrap_or(0);
    if rows == 0 || rows != labels.len() {
        return Err(Error::Data(format!(
            "training set has {rows} images and {} labels",
            labels.len()
        )));
    }
    let mut net = init_network::<T>(&cfg.network, seed)?;
    let schedule = MultiStepLr::at_fractions(cfg.lr, cfg.epochs, &cfg.milestones, cfg.gamma);
    let mut opt = Sgd::new(
        T::from_f64_lossy(cfg.lr),
        T::from_f64_lossy(cfg.momentum),
        T::from_f64_lossy(cfg.weight_decay),
    );
    let mut rng = rng_for(seed, Stream::EvalShuffle, 0);
    let mut order: Vec<usize> = (0..rows).collect();
    let il = images.row_len();
    let mut shape = images.shape().to_vec();
    for epoch in 0..cfg.epochs {
        opt.lr = T::from_f64_lossy(schedule.lr_at(epoch));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * il);
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * il..(i + 1) * il]);
            }
            shape[0] = chunk.len();
            let batch = Tensor::new(&shape, data)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = net.param_gradients(&batch, &y)?;
            opt.step(&mut net.params, grads.into_iter().map(Some).collect())?;
        }
    }
    if !net.params.iter().all(Tensor::all_finite) {
        return Err(Error::Numeric("evaluation network diverged".into()));
    }
    let acc = accuracy(&net, test)?;
    Ok((net, acc))
}

/// Anything that yields a training set for each size `1..=max_size()`.
pub trait SizedSource<T> {
    fn max_size(&self) -> usize;
    /// Class-major images and hard labels of the size-`n` dataset.
    fn training_set(&self, n: usize) -> Result<(Tensor<T>, Vec<usize>)>;
}

impl<T: Scalar> SizedSource<T> for SyntheticDataset<T> {
    fn max_size(&self) -> usize {
        self.ipc
    }

    fn training_set(&self, n: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok(self.subset(n)?.to_batch())
    }
}

/// Mean and (population) standard deviation of one (method, size) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub size: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by the count).
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

impl EvaluationReport {
    pub fn row(&self, method: &str, size: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.size == size)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn sizes(&self, method: &str) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.size)
            .collect()
    }

    /// Mean of a method's per-size means (the "Avg." column).
    pub fn average(&self, method: &str) -> Result<f64> {
        let means: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.mean)
            .collect();
        if means.is_empty() {
            return Err(Error::Report(format!("no rows for method {method}")));
        }
        Ok(mean(&means))
    }

    /// Concatenates reports evaluated under the same configuration.
    pub fn merge(mut self, other: EvaluationReport) -> Result<Self> {
        if self.config_digest != other.config_digest {
            return Err(Error::Report(format!(
                "evaluation configs differ ({} vs {})",
                self.config_digest, other.config_digest
            )));
        }
        for r in other.rows {
            if self.row(&r.method, r.size).is_some() {
                return Err(Error::Report(format!(
                    "duplicate row {} size {}",
                    r.method, r.size
                )));
            }
            self.rows.push(r);
        }
        Ok(self)
    }

    /// Columns `method,size,seed,accuracy`.
    pub fn write_per_seed_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "size", "seed", "accuracy"])?;
        for r in &self.rows {
            for (s, a) in r.seeds.iter().zip(&r.accuracies) {
                w.write_record([
                    r.method.clone(),
                    r.size.to_string(),
                    s.to_string(),
                    a.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `method,size,mean,std`; `std` is empty for a single repeat.
    pub fn write_aggregated_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "size", "mean", "std"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.size.to_string(),
                r.mean.to_string(),
                r.std.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains `repeats` networks per size and aggregates test accuracy.
pub fn evaluate_all_subsets<T: Scalar, S: SizedSource<T> + ?Sized>(
    method: &str,
    source: &S,
    sizes: &[usize],
    test: &RealDataset<T>,
    cfg: &EvalConfig,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no sizes to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for n in sizes {
        if n == 0 || n > source.max_size() {
            return Err(Error::OutOfRange {
                what: "evaluation size",
                value: n,
                allowed: format!("1..={}", source.max_size()),
            });
        }
        let (images, labels) = source.training_set(n)?;
        let seeds: Vec<u64> = (0..cfg.repeats).map(|r| cfg.repeat_seed(r)).collect();
        let accuracies = seeds
            .iter()
            .map(|&s| train_on_subset(&images, &labels, test, cfg, s).map(|(_, a)| a))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ReportRow {
            method: method.to_string(),
            size: n,
            mean: mean(&accuracies),
            std: (accuracies.len() >= 2).then(|| std_dev(&accuracies)),
            seeds,
            accuracies,
        });
    }
    Ok(EvaluationReport {
        config_digest: cfg.digest(),
        rows,
    })
}

/// `mean_A(n) − mean_C(n)` in accuracy points.
pub fn subset_degradation_gap(
    report_a: &EvaluationReport,
    method_a: &str,
    report_c: &EvaluationReport,
    method_c: &str,
    n: usize,
) -> Result<f64> {
    let a = report_a
        .row(method_a, n)
        .ok_or_else(|| Error::Report(format!("{method_a} has no size {n}")))?;
    let c = report_c
        .row(method_c, n)
        .ok_or_else(|| Error::Report(format!("{method_c} has no size {n}")))?;
    Ok(a.mean - c.mean)
}

// ----- baselines -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    A,
    B,
    C,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            "C" | "c" => Ok(Self::C),
            other => Err(Error::InvalidConfig(format!(
                "unknown baseline kind {other:?}"
            ))),
        }
    }
}

/// Multi-size baselines built from plain condensation.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline<T> {
    /// `datasets[n - 1]` was condensed directly to `n` images per class.
    A(Vec<SyntheticDataset<T>>),
    /// `N` single-image condensations stacked; size `n` uses the first `n`.
    B(SyntheticDataset<T>),
    /// One condensation to `N`; size `n` is its prefix.
    C(SyntheticDataset<T>),
}

impl<T: Scalar> Baseline<T> {
    pub fn kind(&self) -> BaselineKind {
        match self {
            Baseline::A(_) => BaselineKind::A,
            Baseline::B(_) => BaselineKind::B,
            Baseline::C(_) => BaselineKind::C,
        }
    }

    /// Images per class kept on disk across all sizes.
    pub fn stored_images_per_class(&self) -> usize {
        match self {
            Baseline::A(v) => v.iter().map(|d| d.ipc).sum(),
            Baseline::B(d) | Baseline::C(d) => d.ipc,
        }
    }

    /// Every stored dataset.
    pub fn datasets(&self) -> Vec<&SyntheticDataset<T>> {
        match self {
            Baseline::A(v) => v.iter().collect(),
            Baseline::B(d) | Baseline::C(d) => vec![d],
        }
    }
}

impl<T: Scalar> SizedSource<T> for Baseline<T> {
    fn max_size(&self) -> usize {
        match self {
            Baseline::A(v) => v.len(),
            Baseline::B(d) | Baseline::C(d) => d.ipc,
        }
    }

    fn training_set(&self, n: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        match self {
            Baseline::A(v) => {
                let d = v.get(n.wrapping_sub(1)).ok_or(Error::OutOfRange {
                    what: "baseline size",
                    value: n,
                    allowed: format!("1..={}", v.len()),
                })?;
                Ok(d.to_batch())
            }
            Baseline::B(d) | Baseline::C(d) => Ok(d.subset(n)?.to_batch()),
        }
    }
}

/// Seed of the `i`-th independent condensation inside a baseline.
pub fn baseline_seed(master: u64, i: usize) -> u64 {
    derive_seed(master, Stream::Baseline, i as u64)
}

/// Builds baseline `kind` up to `target` images per class; `cfg.ipc` is ignored.
pub fn build_baseline<T: Scalar>(
    kind: BaselineKind,
    target: usize,
    cfg: &CondensationConfig,
    real: &RealDataset<T>,
) -> Result<Baseline<T>> {
    if target == 0 {
        return Err(Error::OutOfRange {
            what: "baseline size",
            value: 0,
            allowed: "≥ 1".into(),
        });
    }
    let at = |ipc: usize, seed: u64| CondensationConfig {
        ipc,
        seed,
        ..cfg.basic()
    };
    Ok(match kind {
        BaselineKind::A => Baseline::A(
            (1..=target)
                .map(|n| {
                    let c = at(n, baseline_seed(cfg.seed, n));
                    let init = init_synthetic(real, n, c.seed, c.init)?;
                    Ok(condense_from(&c, real, init, &mut NoObserver)?.synthetic)
                })
                .collect::<Result<_>>()?,
        ),
        BaselineKind::B => {
            // One draw of `target` distinct images per class; run i starts from the i-th.
            let picks = random_real_indices(real, target, cfg.seed)?;
            let mut parts = Vec::with_capacity(target);
            for i in 0..target {
                let c = at(1, baseline_seed(cfg.seed, i + 1));
                let idx: Vec<Vec<usize>> = picks.iter().map(|p| vec![p[i]]).collect();
                let init = match cfg.init {
                    crate::datasets::InitStrategy::RandomReal => init_from_indices(real, &idx)?,
                    crate::datasets::InitStrategy::Noise => {
                        init_synthetic(real, 1, c.seed, c.init)?
                    }
                };
                parts.push(condense_from(&c, real, init, &mut NoObserver)?.synthetic);
            }
            Baseline::B(stack_single_image_sets(&parts)?)
        }
        BaselineKind::C => {
            let c = at(target, cfg.seed);
            let init = init_synthetic(real, target, c.seed, c.init)?;
            Baseline::C(condense_from(&c, real, init, &mut NoObserver)?.synthetic)
        }
    })
}

/// `[K, 1, ...]` sets → one `[K, N, ...]` set, keeping run order as rank.
fn stack_single_image_sets<T: Scalar>(
    parts: &[SyntheticDataset<T>],
) -> Result<SyntheticDataset<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Data("no parts to stack".into()))?;
    let (k, [c, h, w]) = (first.classes, first.image_shape);
    let mut data = Vec::with_capacity(k * parts.len() * c * h * w);
    for class in 0..k {
        for p in parts {
            data.extend_from_slice(p.class_block_data(class));
        }
    }
    SyntheticDataset::new(Tensor::new(&[k, parts.len(), c, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_real, RealSource, RealSplits};

    fn toy() -> RealSplits<f64> {
        load_real(&RealSource::Gaussians {
            classes: 3,
            per_class: 30,
            test_per_class: 20,
            shape: [1, 4, 4],
            separation: 3.0,
            seed: 2,
        })
        .unwrap()
    }

    fn eval_cfg(repeats: usize) -> EvalConfig {
        EvalConfig {
            epochs: 20,
            repeats,
            ..EvalConfig::desk(NetworkSpec::mlp(1, 8, [1, 4, 4], 3))
        }
    }

    #[test]
    fn std_matches_two_pass_oracle() {
        let xs = [71.5, 68.25, 70.0];
        let m = (71.5 + 68.25 + 70.0) / 3.0;
        let v = ((71.5f64 - m).powi(2) + (68.25f64 - m).powi(2) + (70.0f64 - m).powi(2)) / 3.0;
        assert!((std_dev(&xs) - v.sqrt()).abs() <= 1e-12);
        assert!((mean(&xs) - m).abs() <= 1e-12);
    }

    #[test]
    fn report_shapes_and_average() {
        let data = toy();
        let syn = init_synthetic(&data.train, 3, 1, Default::default()).unwrap();
        let cfg = eval_cfg(2);
        let rep = evaluate_all_subsets("C", &syn, &[3, 1], &data.test, &cfg).unwrap();
        assert_eq!(rep.sizes("C"), vec![1, 3]);
        let want = (rep.rows[0].mean + rep.rows[1].mean) / 2.0;
        assert!((rep.average("C").unwrap() - want).abs() <= 1e-9);
        for r in &rep.rows {
            assert!((r.std.unwrap() - std_dev(&r.accuracies)).abs() <= 1e-9);
        }
        let single = evaluate_all_subsets("C", &syn, &[3], &data.test, &eval_cfg(1)).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].std, None);
        assert!(evaluate_all_subsets("C", &syn, &[4], &data.test, &cfg).is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_read_only() {
        let data = toy();
        let syn = init_synthetic(&data.train, 2, 4, Default::default()).unwrap();
        let before = syn.fingerprint();
        let cfg = eval_cfg(1);
        let a = evaluate_all_subsets("m", &syn, &[1, 2], &data.test, &cfg).unwrap();
        let b = evaluate_all_subsets("m", &syn, &[1, 2], &data.test, &cfg).unwrap();
        assert_eq!(syn.fingerprint(), before);
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_aggregated_csv(&mut ca).unwrap();
        b.write_aggregated_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn zero_epochs_near_chance() {
        let data = toy();
        let (x, y) = (data.train.images.clone(), data.train.labels.clone());
        let cfg = EvalConfig {
            epochs: 0,
            ..eval_cfg(1)
        };
        let mut accs = Vec::new();
        for s in 0..5 {
            accs.push(train_on_subset(&x, &y, &data.test, &cfg, s).unwrap().1);
        }
        assert!((mean(&accs) - 100.0 / 3.0).abs() < 20.0, "{accs:?}");
    }

    #[test]
    fn gap_requires_both_sizes() {
        let row = |m: &str, n, mean| ReportRow {
            method: m.into(),
            size: n,
            seeds: vec![0],
            accuracies: vec![mean],
            mean,
            std: None,
        };
        let a = EvaluationReport {
            config_digest: "x".into(),
            rows: vec![row("A", 1, 50.80)],
        };
        let c = EvaluationReport {
            config_digest: "x".into(),
            rows: vec![row("C", 1, 27.49), row("C", 2, 30.0)],
        };
        assert!((subset_degradation_gap(&a, "A", &c, "C", 1).unwrap() - 23.31).abs() < 1e-9);
        assert!(subset_degradation_gap(&a, "A", &c, "C", 2).is_err());
    }

    #[test]
    fn baseline_storage_and_aliasing() {
        let data = toy();
        let cfg = CondensationConfig {
            network: NetworkSpec::mlp(1, 8, [1, 4, 4], 3),
            outer_loops: 1,
            inner_epochs: 1,
            selection_period: 1,
            batch_real: 4,
            ..CondensationConfig::desk([1, 4, 4], 3, 1)
        };
        let a = build_baseline(BaselineKind::A, 4, &cfg, &data.train).unwrap();
        let b = build_baseline(BaselineKind::B, 4, &cfg, &data.train).unwrap();
        let c = build_baseline(BaselineKind::C, 4, &cfg, &data.train).unwrap();
        assert_eq!(a.stored_images_per_class(), 10);
        assert_eq!(b.stored_images_per_class(), 4);
        assert_eq!(c.stored_images_per_class(), 4);
        assert_eq!(
            a.datasets().iter().map(|d| d.ipc).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        let Baseline::C(full) = &c else {
            unreachable!()
        };
        let (x2, _) = c.training_set(2).unwrap();
        assert_eq!(x2, full.subset(2).unwrap().to_batch().0);
        assert_eq!(c.training_set(4).unwrap().0, full.to_batch().0);
    }
}
