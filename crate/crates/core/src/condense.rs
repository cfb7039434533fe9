//! Gradient-matching condensation with the subset loss and MLS freezing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datasets::{init_synthetic, BatchSampler, InitStrategy, RealDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::mls::{
    class_feature_distances, gradient_distances, rates, reference_time, select_mls,
    sum_over_classes, FeatureDistanceTrace, MlsState, PassCounter, UpdateScope,
};
use crate::models::{init_network, param_grads_on_graph, Network, NetworkSpec};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, Stream};
use crate::tensor::Tensor;

/// How parameter-gradient differences are reduced to one distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// One MSE over all parameters flattened into a single vector.
    MseGrad,
    /// MSE per layer (weight and bias together), summed over layers.
    #[default]
    LayerwiseMseGrad,
}

/// Quantity compared between checkpoints to pick the MLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    FeatureDistance,
    GradientDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondensationConfig {
    pub network: NetworkSpec,
    pub ipc: usize,
    pub outer_loops: usize,
    pub inner_epochs: usize,
    pub batch_real: usize,
    /// Batch size of the network's own training step.
    pub batch_train: usize,
    pub syn_lr: f64,
    pub net_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub selection_period: usize,
    pub subset_loss_enabled: bool,
    pub mls_compare_enabled: bool,
    pub freezing_enabled: bool,
    pub class_wise_mls: bool,
    pub distance_metric: DistanceMetric,
    pub selection_metric: SelectionMetric,
    pub init: InitStrategy,
    pub seed: u64,
}

impl CondensationConfig {
    /// Desk-scale defaults for a dataset with `classes` classes of `input_shape` images.
    pub fn desk(input_shape: [usize; 3], classes: usize, ipc: usize) -> Self {
        Self {
            network: NetworkSpec::convnet(2, 16, input_shape, classes),
            ipc,
            outer_loops: 20,
            inner_epochs: 10,
            batch_real: 32,
            batch_train: 128,
            syn_lr: 100.0,
            net_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            selection_period: 5,
            subset_loss_enabled: true,
            mls_compare_enabled: true,
            freezing_enabled: true,
            class_wise_mls: false,
            distance_metric: DistanceMetric::LayerwiseMseGrad,
            selection_metric: SelectionMetric::FeatureDistance,
            init: InitStrategy::RandomReal,
            seed: 0,
        }
    }

    /// The same run with every subset mechanism switched off.
    pub fn basic(&self) -> Self {
        Self {
            subset_loss_enabled: false,
            mls_compare_enabled: false,
            freezing_enabled: false,
            class_wise_mls: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.ipc == 0 {
            return bad("ipc must be at least 1".into());
        }
        if self.inner_epochs == 0 || self.selection_period == 0 {
            return bad("inner_epochs and selection_period must be positive".into());
        }
        if self.outer_loops > 0 && self.selection_period > self.outer_loops {
            return bad(format!(
                "selection_period {} exceeds outer_loops {}",
                self.selection_period, self.outer_loops
            ));
        }
        if self.batch_real == 0 || self.batch_train == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, v) in [
            ("syn_lr", self.syn_lr),
            ("net_lr", self.net_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Whether MLS tracking and the subset loss are active for this run.
    pub fn uses_subsets(&self) -> bool {
        self.subset_loss_enabled && self.ipc >= 2
    }

    fn measures(&self, t: usize) -> bool {
        self.uses_subsets()
            && self.mls_compare_enabled
            && (t == 1 || t.is_multiple_of(self.selection_period))
    }
}

// ----- matching loss ---------------------------------------------------------

/// Gradients of the class loss on a real batch, as constants.
pub fn real_param_grads<T: Scalar>(
    net: &Network<T>,
    real_batch: &Tensor<T>,
    class: usize,
) -> Result<Vec<Tensor<T>>> {
    let rows = real_batch.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::Data("empty real batch".into()));
    }
    net.param_gradients(real_batch, &vec![class; rows])
}

/// Records the matching distance between the parameter gradients of `x`
/// (all labelled `class`) and the fixed `real_grads`.
///
/// `layer_weights` multiplies each layer's term (default 1). With
/// `create_graph` the result is differentiable w.r.t. `x`.
#[allow(clippy::too_many_arguments)]
pub fn match_loss_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &Network<T>,
    x: Var,
    class: usize,
    real_grads: &[Tensor<T>],
    metric: DistanceMetric,
    layer_weights: Option<&[T]>,
    create_graph: bool,
) -> Result<Var> {
    let rows = g.shape(x).first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::Data("empty synthetic batch".into()));
    }
    if real_grads.len() != net.params.len() {
        return Err(Error::shape(
            "grad_match_loss",
            format!(
                "{} real gradients for {} parameters",
                real_grads.len(),
                net.params.len()
            ),
        ));
    }
    let syn_grads = param_grads_on_graph(net, g, x, &vec![class; rows], create_graph)?;
    let groups = net.layer_groups();
    let total_len: usize = net.params.iter().map(Tensor::len).sum();
    let mut acc: Option<Var> = None;
    for (l, idx) in groups.iter().enumerate() {
        let layer_len: usize = idx.iter().map(|&i| net.params[i].len()).sum();
        let denom = match metric {
            DistanceMetric::LayerwiseMseGrad => layer_len,
            DistanceMetric::MseGrad => total_len,
        };
        let w = layer_weights.map_or(T::one(), |ws| ws[l]);
        for &i in idx {
            let r = g.constant(real_grads[i].clone());
            let m = g.mse(syn_grads[i], r)?;
            let share = T::from_usize(net.params[i].len()).expect("len")
                / T::from_usize(denom).expect("len");
            let term = g.scale(m, share * w);
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("network has parameters"))
}

/// Matching distance between the gradients of a synthetic and a real batch of one class.
pub fn grad_match_loss<T: Scalar>(
    net: &Network<T>,
    syn_batch: &Tensor<T>,
    real_batch: &Tensor<T>,
    class: usize,
    metric: DistanceMetric,
) -> Result<T> {
    let real = real_param_grads(net, real_batch, class)?;
    let mut g = Graph::new();
    let x = g.constant(syn_batch.clone());
    let d = match_loss_on_graph(&mut g, net, x, class, &real, metric, None, false)?;
    Ok(g.value(d).item())
}

/// Gradient of the matching distance w.r.t. the synthetic batch, with the loss value.
pub fn grad_match_loss_grad<T: Scalar>(
    net: &Network<T>,
    syn_batch: &Tensor<T>,
    real_grads: &[Tensor<T>],
    class: usize,
    metric: DistanceMetric,
) -> Result<(T, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.param(syn_batch.clone());
    let d = match_loss_on_graph(&mut g, net, x, class, real_grads, metric, None, true)?;
    let gx = g.grad(d, &[x], false)?[0];
    Ok((g.value(d).item(), g.value(gx).clone()))
}

/// Output of one class step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStep<T> {
    /// `[N, C, H, W]` gradient w.r.t. the class block.
    pub grad: Tensor<T>,
    pub base_loss: T,
    pub subset_loss: Option<T>,
}

/// Gradient of `D(S_c, B) + D(S_c[:n], B)` w.r.t. the class block `S_c`.
///
/// `subset = None` gives the base term alone.
pub fn combined_update_grad<T: Scalar>(
    net: &Network<T>,
    block: &Tensor<T>,
    class: usize,
    real_grads: &[Tensor<T>],
    subset: Option<usize>,
    metric: DistanceMetric,
) -> Result<ClassStep<T>> {
    let ipc = block.shape().first().copied().unwrap_or(0);
    if let Some(n) = subset {
        if n == 0 || n >= ipc {
            return Err(Error::OutOfRange {
                what: "subset for the subset loss",
                value: n,
                allowed: format!("1..{ipc}"),
            });
        }
    }
    let mut g = Graph::new();
    let x = g.param(block.clone());
    let base = match_loss_on_graph(&mut g, net, x, class, real_grads, metric, None, true)?;
    let (total, subset_loss) = match subset {
        Some(n) => {
            let prefix = g.slice_rows(x, 0, n)?;
            let sub =
                match_loss_on_graph(&mut g, net, prefix, class, real_grads, metric, None, true)?;
            (g.add(base, sub)?, Some(g.value(sub).item()))
        }
        None => (base, None),
    };
    let base_loss = g.value(base).item();
    let gx = g.grad(total, &[x], false)?[0];
    Ok(ClassStep {
        grad: g.value(gx).clone(),
        base_loss,
        subset_loss,
    })
}

/// `S_c ← S_c − lr·grad` on the rows `scope` leaves trainable.
pub fn apply_class_update<T: Scalar>(
    syn: &mut SyntheticDataset<T>,
    class: usize,
    grad: &Tensor<T>,
    lr: T,
    scope: UpdateScope,
) -> Result<()> {
    scope.validate(syn.ipc)?;
    if class >= syn.classes {
        return Err(Error::OutOfRange {
            what: "class",
            value: class,
            allowed: format!("0..{}", syn.classes),
        });
    }
    let il = syn.image_len();
    if grad.len() != syn.ipc * il {
        return Err(Error::shape(
            "apply_update",
            format!(
                "gradient {:?} for a class block of {} images",
                grad.shape(),
                syn.ipc
            ),
        ));
    }
    let start = scope.frozen_rows() * il;
    let block = syn.class_block_data_mut(class);
    for (s, &d) in block[start..].iter_mut().zip(&grad.data()[start..]) {
        *s -= lr * d;
    }
    Ok(())
}

/// Applies a `[K, N, C, H, W]` gradient to every class under one scope.
pub fn apply_update<T: Scalar>(
    syn: &mut SyntheticDataset<T>,
    grad: &Tensor<T>,
    lr: T,
    scope: UpdateScope,
) -> Result<()> {
    if grad.shape() != syn.images.shape() {
        return Err(Error::shape(
            "apply_update",
            format!(
                "gradient {:?} vs dataset {:?}",
                grad.shape(),
                syn.images.shape()
            ),
        ));
    }
    let per = syn.ipc * syn.image_len();
    let [c, h, w] = syn.image_shape;
    for k in 0..syn.classes {
        let part = Tensor::new(
            &[syn.ipc, c, h, w],
            grad.data()[k * per..(k + 1) * per].to_vec(),
        )?;
        apply_class_update(syn, k, &part, lr, scope)?;
    }
    Ok(())
}

// ----- log -------------------------------------------------------------------

/// One line of the condensation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    /// End of outer loop `t`: mean losses and the state used during the loop.
    Loop {
        t: usize,
        base_loss: f64,
        subset_loss: Option<f64>,
        mls: Vec<usize>,
        frozen: Vec<usize>,
        network: u64,
    },
    /// Per-epoch distances (`measurements[e][n - 1]`) and their average.
    Checkpoint {
        t: usize,
        class: Option<usize>,
        measurements: Vec<Vec<f64>>,
        distances: Vec<f64>,
    },
    Selection {
        t: usize,
        class: Option<usize>,
        reference_t: usize,
        rates: Vec<f64>,
        previous: usize,
        current: usize,
        scope: UpdateScope,
    },
}

/// Append-only record of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CondensationLog {
    pub records: Vec<LogRecord>,
}

impl CondensationLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn selections(&self) -> impl Iterator<Item = &LogRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, LogRecord::Selection { .. }))
    }

    /// Rebuilds the distance trace of one class (or the global trace for `None`).
    pub fn trace(&self, class: Option<usize>) -> Result<FeatureDistanceTrace> {
        let mut trace = FeatureDistanceTrace::default();
        for r in &self.records {
            if let LogRecord::Checkpoint {
                t,
                class: c,
                measurements,
                ..
            } = r
            {
                if *c == class {
                    trace.epochs = measurements.len();
                    trace.record_checkpoint(*t, measurements)?;
                }
            }
        }
        Ok(trace)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

// ----- engine ----------------------------------------------------------------

/// Hook called around every synthetic update.
pub trait StepObserver<T> {
    /// `before` and `after` are the class block around the update at outer loop `t`.
    fn on_class_step(
        &mut self,
        t: usize,
        class: usize,
        scope: UpdateScope,
        before: &[T],
        after: &[T],
    );

    /// Real batch used for the network's own update.
    fn on_network_step(&mut self, _t: usize, _indices: &[usize]) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<T> StepObserver<T> for NoObserver {
    fn on_class_step(&mut self, _: usize, _: usize, _: UpdateScope, _: &[T], _: &[T]) {}
}

/// Result of a condensation run.
#[derive(Debug, Clone)]
pub struct Condensed<T> {
    pub synthetic: SyntheticDataset<T>,
    pub log: CondensationLog,
    /// One state per class in class-wise mode, otherwise a single global state.
    pub mls: Vec<MlsState>,
    pub passes: PassCounter,
}

fn check_real<T: Scalar>(cfg: &CondensationConfig, real: &RealDataset<T>) -> Result<()> {
    if real.num_classes != cfg.network.num_classes {
        return Err(Error::InvalidConfig(format!(
            "network has {} classes, data has {}",
            cfg.network.num_classes, real.num_classes
        )));
    }
    if real.image_shape() != cfg.network.input_shape {
        return Err(Error::InvalidConfig(format!(
            "network expects {:?} images, data has {:?}",
            cfg.network.input_shape,
            real.image_shape()
        )));
    }
    Ok(())
}

/// Full MDC condensation from a fresh initialization.
pub fn condense<T: Scalar>(
    cfg: &CondensationConfig,
    real: &RealDataset<T>,
) -> Result<Condensed<T>> {
    cfg.validate()?;
    check_real(cfg, real)?;
    let syn = init_synthetic(real, cfg.ipc, cfg.seed, cfg.init)?;
    condense_from(cfg, real, syn, &mut NoObserver)
}

/// Plain gradient-matching condensation (every subset mechanism off).
pub fn condense_basic<T: Scalar>(
    cfg: &CondensationConfig,
    real: &RealDataset<T>,
) -> Result<SyntheticDataset<T>> {
    Ok(condense(&cfg.basic(), real)?.synthetic)
}

/// Condenses starting from `syn`, reporting every step to `observer`.
pub fn condense_from<T: Scalar>(
    cfg: &CondensationConfig,
    real: &RealDataset<T>,
    mut syn: SyntheticDataset<T>,
    observer: &mut dyn StepObserver<T>,
) -> Result<Condensed<T>> {
    cfg.validate()?;
    check_real(cfg, real)?;
    if syn.classes != real.num_classes
        || syn.ipc != cfg.ipc
        || syn.image_shape != real.image_shape()
    {
        return Err(Error::InvalidConfig(format!(
            "initial synthetic set {:?} does not match ipc {} and the data",
            syn.images.shape(),
            cfg.ipc
        )));
    }
    let classes = real.num_classes;
    let groups = if cfg.class_wise_mls { classes } else { 1 };
    let group_of = |c: usize| if cfg.class_wise_mls { c } else { 0 };
    let mut states = vec![MlsState::new(cfg.ipc); groups];
    let mut traces = vec![FeatureDistanceTrace::new(cfg.inner_epochs); groups];
    let mut log = CondensationLog::default();
    let mut passes = PassCounter::default();
    let syn_lr = T::from_f64_lossy(cfg.syn_lr);

    let mut class_sampler = BatchSampler::new(cfg.seed, Stream::ClassBatches, cfg.batch_real);
    let mut train_sampler = BatchSampler::new(cfg.seed, Stream::NetworkBatches, cfg.batch_train);

    for t in 1..=cfg.outer_loops {
        let mut net: Network<T> = init_network(
            &cfg.network,
            derive_seed(cfg.seed, Stream::NetworkInit, t as u64),
        )?;
        let mut opt = Sgd::new(
            T::from_f64_lossy(cfg.net_lr),
            T::from_f64_lossy(cfg.momentum),
            T::from_f64_lossy(cfg.weight_decay),
        );
        let measuring = cfg.measures(t);
        let mut measurements: Vec<Vec<Vec<f64>>> = vec![Vec::new(); groups];
        let (mut base_sum, mut subset_sum, mut steps) = (0.0, 0.0, 0usize);

        for _epoch in 0..cfg.inner_epochs {
            let mut real_batches = Vec::with_capacity(classes);
            for c in 0..classes {
                let batch = class_sampler.sample_class_batch(real, c)?;
                let real_grads = real_param_grads(&net, &batch.images, c)?;
                let state = &states[group_of(c)];
                let subset = cfg.uses_subsets().then_some(state.current);
                let scope = if cfg.uses_subsets() {
                    state.scope
                } else {
                    UpdateScope::Full
                };
                let step = combined_update_grad(
                    &net,
                    &syn.class_block(c),
                    c,
                    &real_grads,
                    subset,
                    cfg.distance_metric,
                )?;
                let base = step.base_loss.to_f64_lossy();
                let sub = step.subset_loss.map_or(0.0, |v| v.to_f64_lossy());
                if !base.is_finite() || !sub.is_finite() || !step.grad.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite matching loss at outer loop {t}, class {c} (base {base}, subset {sub})"
                    )));
                }
                base_sum += base;
                subset_sum += sub;
                steps += 1;
                let before = syn.class_block_data(c).to_vec();
                apply_class_update(&mut syn, c, &step.grad, syn_lr, scope)?;
                observer.on_class_step(t, c, scope, &before, syn.class_block_data(c));
                real_batches.push(batch.images);
            }

            if measuring {
                let per_class = match cfg.selection_metric {
                    SelectionMetric::FeatureDistance => {
                        class_feature_distances(&net, &syn, &real_batches, &mut passes)?
                    }
                    SelectionMetric::GradientDistance => gradient_distances(
                        &net,
                        &syn,
                        &real_batches,
                        cfg.distance_metric,
                        &mut passes,
                    )?,
                };
                if cfg.class_wise_mls {
                    for (m, row) in measurements.iter_mut().zip(per_class) {
                        m.push(row);
                    }
                } else {
                    measurements[0].push(sum_over_classes(&per_class));
                }
            }

            let batch = train_sampler.sample_batch(real);
            observer.on_network_step(t, &batch.indices);
            let grads = net.param_gradients(&batch.images, &batch.labels)?;
            opt.step(&mut net.params, grads.into_iter().map(Some).collect())?;
            if !net.params.iter().all(Tensor::all_finite) {
                return Err(Error::Numeric(format!(
                    "network diverged at outer loop {t}"
                )));
            }
        }

        log.push(LogRecord::Loop {
            t,
            base_loss: base_sum / steps as f64,
            subset_loss: cfg.uses_subsets().then(|| subset_sum / steps as f64),
            mls: states.iter().map(|s| s.current).collect(),
            frozen: states.iter().map(|s| s.scope.frozen_rows()).collect(),
            network: network_fingerprint(&net),
        });

        if measuring {
            for (gi, rows) in measurements.into_iter().enumerate() {
                traces[gi].record_checkpoint(t, &rows)?;
                log.push(LogRecord::Checkpoint {
                    t,
                    class: cfg.class_wise_mls.then_some(gi),
                    distances: traces[gi].get(t).expect("just recorded").distances.clone(),
                    measurements: rows,
                });
            }
            if t.is_multiple_of(cfg.selection_period) {
                for gi in 0..groups {
                    let dt = cfg.selection_period;
                    let r = rates(&traces[gi], t, dt, cfg.ipc)?;
                    let chosen = select_mls(&traces[gi], t, dt, cfg.ipc)?;
                    let ev = states[gi].advance(t, chosen, cfg.freezing_enabled)?.clone();
                    log.push(LogRecord::Selection {
                        t,
                        class: cfg.class_wise_mls.then_some(gi),
                        reference_t: reference_time(t, dt),
                        rates: r,
                        previous: ev.previous,
                        current: ev.current,
                        scope: ev.scope,
                    });
                }
            }
        }
    }

    Ok(Condensed {
        synthetic: syn,
        log,
        mls: states,
        passes,
    })
}

/// FNV-1a digest of a network's parameter bits.
pub fn network_fingerprint<T: Scalar>(net: &Network<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in &net.params {
        for v in p.data() {
            h ^= v.bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}
