//! Most-learnable-subset (MLS) selection.
//!
//! Feature distances between each proper prefix `S[n]` and real data are
//! averaged per checkpoint. The subset whose distance moves fastest between
//! two checkpoints is the MLS; when the MLS grows, the previous one is frozen.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::condense::{match_loss_on_graph, real_param_grads, DistanceMetric};
use crate::datasets::SyntheticDataset;
use crate::error::{Error, Result};
use crate::models::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which synthetic rows a condensation step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", content = "k", rename_all = "snake_case")]
pub enum UpdateScope {
    Full,
    /// Rows with within-class index `< k` are frozen.
    AllExceptPrefix(usize),
}

impl UpdateScope {
    pub fn frozen_rows(self) -> usize {
        match self {
            UpdateScope::Full => 0,
            UpdateScope::AllExceptPrefix(k) => k,
        }
    }

    pub fn validate(self, ipc: usize) -> Result<()> {
        match self {
            UpdateScope::AllExceptPrefix(k) if k == 0 || k >= ipc => Err(Error::OutOfRange {
                what: "frozen prefix",
                value: k,
                allowed: format!("1..{ipc}"),
            }),
            _ => Ok(()),
        }
    }
}

/// One averaged checkpoint: `distances[n - 1]` belongs to `S[n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    pub distances: Vec<f64>,
}

/// Time-indexed per-subset average feature distances.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureDistanceTrace {
    pub epochs: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl FeatureDistanceTrace {
    /// A trace whose checkpoints average `epochs` measurements each.
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            checkpoints: Vec::new(),
        }
    }

    /// Appends the column means of `measurements` (one row per inner epoch).
    pub fn record_checkpoint(&mut self, t: usize, measurements: &[Vec<f64>]) -> Result<()> {
        if measurements.len() != self.epochs {
            return Err(Error::InvalidConfig(format!(
                "checkpoint at t={t} needs {} measurement rows, got {}",
                self.epochs,
                measurements.len()
            )));
        }
        let width = measurements[0].len();
        if measurements.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidConfig(format!(
                "ragged measurement rows at t={t}"
            )));
        }
        if let Some(last) = self.checkpoints.last() {
            if t <= last.t {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint t={t} not after t={}",
                    last.t
                )));
            }
            if width != last.distances.len() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint t={t} has {width} subsets, previous had {}",
                    last.distances.len()
                )));
            }
        }
        let rows = measurements.len() as f64;
        let distances = (0..width)
            .map(|j| measurements.iter().map(|r| r[j]).sum::<f64>() / rows)
            .collect();
        self.checkpoints.push(Checkpoint { t, distances });
        Ok(())
    }

    /// Inserts an already-averaged checkpoint.
    pub fn push_averaged(&mut self, t: usize, distances: Vec<f64>) -> Result<()> {
        if let Some(last) = self.checkpoints.last() {
            if t <= last.t {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint t={t} not after t={}",
                    last.t
                )));
            }
        }
        self.checkpoints.push(Checkpoint { t, distances });
        Ok(())
    }

    pub fn get(&self, t: usize) -> Option<&Checkpoint> {
        self.checkpoints
            .binary_search_by_key(&t, |c| c.t)
            .ok()
            .map(|i| &self.checkpoints[i])
    }
}

/// Outer loop at which the comparison checkpoint for time `t` was taken.
///
/// Checkpoints are taken at outer loop 1 and at every multiple of `dt`; the
/// first comparison (`t = dt`) therefore reaches back to loop 1.
pub fn reference_time(t: usize, dt: usize) -> usize {
    if t > dt {
        t - dt
    } else {
        1
    }
}

/// `R = |F̄_t[n] − F̄_ref[n]| / dt`.
pub fn rate_of_change(trace: &FeatureDistanceTrace, n: usize, t: usize, dt: usize) -> Result<f64> {
    if dt == 0 {
        return Err(Error::InvalidConfig(
            "selection period must be positive".into(),
        ));
    }
    let now = trace.get(t).ok_or(Error::MissingCheckpoint(t))?;
    let r = reference_time(t, dt);
    let before = trace.get(r).ok_or(Error::MissingCheckpoint(r))?;
    if n == 0 || n > now.distances.len() {
        return Err(Error::OutOfRange {
            what: "subset",
            value: n,
            allowed: format!("1..={}", now.distances.len()),
        });
    }
    Ok((now.distances[n - 1] - before.distances[n - 1]).abs() / dt as f64)
}

/// Rates for every proper subset `n = 1..N-1`.
pub fn rates(trace: &FeatureDistanceTrace, t: usize, dt: usize, ipc: usize) -> Result<Vec<f64>> {
    (1..ipc).map(|n| rate_of_change(trace, n, t, dt)).collect()
}

/// 1-based argmax; ties go to the smallest subset.
pub fn argmax_smallest(rates: &[f64]) -> usize {
    let mut best = 0;
    for (i, &r) in rates.iter().enumerate() {
        if r > rates[best] {
            best = i;
        }
    }
    best + 1
}

/// The MLS index `n*` at time `t`.
pub fn select_mls(trace: &FeatureDistanceTrace, t: usize, dt: usize, ipc: usize) -> Result<usize> {
    if ipc < 2 {
        return Err(Error::OutOfRange {
            what: "images per class",
            value: ipc,
            allowed: "≥ 2 for subset selection".into(),
        });
    }
    Ok(argmax_smallest(&rates(trace, t, dt, ipc)?))
}

/// Scope after comparing consecutive MLS choices.
///
/// Shrinking MLS → `Full`; growing MLS → freeze the previous MLS; same size →
/// `prior` is kept.
pub fn freezing_judgement(
    previous: usize,
    current: usize,
    ipc: usize,
    prior: UpdateScope,
) -> Result<UpdateScope> {
    for v in [previous, current] {
        if v == 0 || v >= ipc {
            return Err(Error::OutOfRange {
                what: "MLS index",
                value: v,
                allowed: format!("1..{ipc}"),
            });
        }
    }
    Ok(match current.cmp(&previous) {
        std::cmp::Ordering::Less => UpdateScope::Full,
        std::cmp::Ordering::Greater => UpdateScope::AllExceptPrefix(previous),
        std::cmp::Ordering::Equal => prior,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub t: usize,
    pub previous: usize,
    pub current: usize,
    pub scope: UpdateScope,
}

/// Current and previous MLS with the derived freeze scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlsState {
    pub ipc: usize,
    pub current: usize,
    pub previous: usize,
    pub scope: UpdateScope,
    pub history: Vec<SelectionEvent>,
}

impl MlsState {
    /// Starts at `S[1]` with nothing frozen.
    pub fn new(ipc: usize) -> Self {
        Self {
            ipc,
            current: 1,
            previous: 1,
            scope: UpdateScope::Full,
            history: Vec::new(),
        }
    }

    /// Records a new selection and re-judges the scope.
    ///
    /// With `freezing` off the scope stays `Full`.
    pub fn advance(
        &mut self,
        t: usize,
        selected: usize,
        freezing: bool,
    ) -> Result<&SelectionEvent> {
        let scope = if freezing {
            freezing_judgement(self.current, selected, self.ipc, self.scope)?
        } else {
            UpdateScope::Full
        };
        self.previous = self.current;
        self.current = selected;
        self.scope = scope;
        self.history.push(SelectionEvent {
            t,
            previous: self.previous,
            current: selected,
            scope,
        });
        Ok(self.history.last().expect("just pushed"))
    }
}

/// Network passes spent on measurements.
///
/// One pass is a sweep over one batch of images; a class-partitioned batch
/// (one loss per class) still counts once. Synthetic and real sides are kept
/// apart.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub forward_synthetic: usize,
    pub backward_synthetic: usize,
    pub forward_real: usize,
    pub backward_real: usize,
}

fn mean_rows<T: Scalar>(features: &Tensor<T>, start: usize, count: usize) -> Vec<f64> {
    let f = features.row_len();
    let mut m = vec![0.0; f];
    for r in start..start + count {
        for (acc, v) in m.iter_mut().zip(&features.data()[r * f..(r + 1) * f]) {
            *acc += v.to_f64_lossy();
        }
    }
    m.iter_mut().for_each(|v| *v /= count as f64);
    m
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-class feature distances of every proper prefix: `out[c][n - 1]`.
///
/// One forward pass over all of `S`; prefix features are prefix rows of it.
/// The distance is the MSE between the subset's mean feature and the real
/// batch's mean feature for that class.
pub fn class_feature_distances<T: Scalar>(
    net: &Network<T>,
    syn: &SyntheticDataset<T>,
    real_batches: &[Tensor<T>],
    counter: &mut PassCounter,
) -> Result<Vec<Vec<f64>>> {
    if real_batches.len() != syn.classes {
        return Err(Error::shape(
            "feature_distance",
            format!(
                "{} real batches for {} classes",
                real_batches.len(),
                syn.classes
            ),
        ));
    }
    let (batch, _) = syn.to_batch();
    let syn_features = net.features(&batch)?;
    counter.forward_synthetic += 1;

    let refs: Vec<&Tensor<T>> = real_batches.iter().collect();
    let real_all = Tensor::concat_rows(&refs)?;
    let real_features = net.features(&real_all)?;
    counter.forward_real += 1;

    let mut offset = 0;
    let mut out = Vec::with_capacity(syn.classes);
    for (c, rb) in real_batches.iter().enumerate() {
        let rows = rb.shape()[0];
        if rows == 0 {
            return Err(Error::Data(format!("empty real batch for class {c}")));
        }
        let real_mean = mean_rows(&real_features, offset, rows);
        offset += rows;
        out.push(
            (1..syn.ipc)
                .map(|n| mean_sq_diff(&mean_rows(&syn_features, c * syn.ipc, n), &real_mean))
                .collect(),
        );
    }
    Ok(out)
}

/// Class-summed feature distance of every proper prefix: `out[n - 1]`.
pub fn feature_distances<T: Scalar>(
    net: &Network<T>,
    syn: &SyntheticDataset<T>,
    real_batches: &[Tensor<T>],
    counter: &mut PassCounter,
) -> Result<Vec<f64>> {
    let per_class = class_feature_distances(net, syn, real_batches, counter)?;
    Ok(sum_over_classes(&per_class))
}

pub(crate) fn sum_over_classes(per_class: &[Vec<f64>]) -> Vec<f64> {
    let width = per_class.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| per_class.iter().map(|r| r[j]).sum())
        .collect()
}

/// Feature distance of one subset `S[n]` (any `1 ≤ n ≤ N`), summed over classes.
pub fn feature_distance<T: Scalar>(
    net: &Network<T>,
    syn: &SyntheticDataset<T>,
    n: usize,
    real_batches: &[Tensor<T>],
) -> Result<f64> {
    let view = syn.subset(n)?;
    if view.size() == 0 {
        return Err(Error::Data("empty subset".into()));
    }
    let (batch, _) = view.to_batch();
    let features = net.features(&batch)?;
    let mut total = 0.0;
    for (c, rb) in real_batches.iter().enumerate() {
        let rf = net.features(rb)?;
        let rm = mean_rows(&rf, 0, rb.shape()[0]);
        total += mean_sq_diff(&mean_rows(&features, c * n, n), &rm);
    }
    Ok(total)
}

/// Gradient-matching distance of every proper prefix, summed over classes: `out[n - 1]`.
///
/// Costs one forward and one backward per subset on the synthetic side, plus
/// one of each on the real side.
pub fn gradient_distances<T: Scalar>(
    net: &Network<T>,
    syn: &SyntheticDataset<T>,
    real_batches: &[Tensor<T>],
    metric: DistanceMetric,
    counter: &mut PassCounter,
) -> Result<Vec<Vec<f64>>> {
    let real_grads: Vec<Vec<Tensor<T>>> = real_batches
        .iter()
        .enumerate()
        .map(|(c, rb)| real_param_grads(net, rb, c))
        .collect::<Result<_>>()?;
    counter.forward_real += 1;
    counter.backward_real += 1;

    let mut per_class = vec![Vec::with_capacity(syn.ipc.saturating_sub(1)); syn.classes];
    for n in 1..syn.ipc {
        let view = syn.subset(n)?;
        for (c, row) in per_class.iter_mut().enumerate() {
            let mut g = Graph::<T>::new();
            let x = g.constant(view.class_batch(c));
            let d = match_loss_on_graph(&mut g, net, x, c, &real_grads[c], metric, None, false)?;
            row.push(g.value(d).item().to_f64_lossy());
        }
        counter.forward_synthetic += 1;
        counter.backward_synthetic += 1;
    }
    Ok(per_class)
}
