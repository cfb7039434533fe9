use mdc_core::condense::{
    condense, condense_basic, condense_from, CondensationConfig, LogRecord, SelectionMetric,
    StepObserver,
};
use mdc_core::datasets::{
    init_synthetic, load_real, BatchSampler, InitStrategy, RealSource, RealSplits,
};
use mdc_core::evaluation::{evaluate_all_subsets, EvalConfig};
use mdc_core::mls::{feature_distance, UpdateScope};
use mdc_core::models::init_network;
use mdc_core::seeding::Stream;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> RealSplits<f64> {
    load_real(&RealSource::Gaussians {
        classes: 3,
        per_class: 40,
        test_per_class: 10,
        shape: [1, 4, 4],
        separation: 2.0,
        seed: 3,
    })
    .unwrap()
}

fn config(ipc: usize) -> CondensationConfig {
    let mut cfg = CondensationConfig::desk([1, 4, 4], 3, ipc);
    cfg.network.width = 4;
    cfg.outer_loops = 6;
    cfg.inner_epochs = 3;
    cfg.batch_real = 8;
    cfg.batch_train = 16;
    cfg.selection_period = 2;
    cfg.syn_lr = 10.0;
    cfg
}

#[test]
fn larger_prefixes_sit_closer_to_real_features() {
    let data = toy();
    let cfg = config(6);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut hits = 0;
    for trial in 0..100u64 {
        let net = init_network::<f64>(&cfg.network, trial).unwrap();
        let syn = init_synthetic(&data.train, cfg.ipc, trial, InitStrategy::RandomReal).unwrap();
        let mut sampler = BatchSampler::new(trial, Stream::ClassBatches, 32);
        let real: Vec<_> = (0..3)
            .map(|c| sampler.sample_class_batch(&data.train, c).unwrap().images)
            .collect();
        let p = rng.random_range(1..cfg.ipc);
        let q = rng.random_range(p + 1..=cfg.ipc);
        let fp = feature_distance(&net, &syn, p, &real).unwrap();
        let fq = feature_distance(&net, &syn, q, &real).unwrap();
        if fp > fq {
            hits += 1;
        }
    }
    assert!(hits >= 80, "only {hits}/100 trials had F(S[p]) > F(S[q])");
}

#[test]
fn class_wise_mode_tracks_each_class() {
    let data = toy();
    let mut cfg = config(4);
    cfg.class_wise_mls = true;
    let out = condense(&cfg, &data.train).unwrap();
    assert_eq!(out.mls.len(), 3);
    let mut per_class = [0usize; 3];
    for r in out.log.selections() {
        if let LogRecord::Selection { class, .. } = r {
            per_class[class.expect("class-wise selections carry a class")] += 1;
        }
    }
    assert_eq!(per_class, [3, 3, 3]);
    for r in &out.log.records {
        if let LogRecord::Loop { mls, frozen, .. } = r {
            assert_eq!((mls.len(), frozen.len()), (3, 3));
        }
    }
}

#[derive(Default)]
struct Recorder {
    network_batches: Vec<Vec<usize>>,
    scopes: Vec<UpdateScope>,
}

impl StepObserver<f64> for Recorder {
    fn on_class_step(&mut self, _: usize, _: usize, scope: UpdateScope, _: &[f64], _: &[f64]) {
        self.scopes.push(scope);
    }

    fn on_network_step(&mut self, _: usize, indices: &[usize]) {
        self.network_batches.push(indices.to_vec());
    }
}

#[test]
fn network_trajectory_ignores_the_synthetic_set() {
    let data = toy();
    let cfg = config(4);
    let networks = |init: InitStrategy| {
        let syn = init_synthetic(&data.train, cfg.ipc, 9, init).unwrap();
        let mut rec = Recorder::default();
        let out = condense_from(&cfg, &data.train, syn, &mut rec).unwrap();
        let prints: Vec<u64> = out
            .log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Loop { network, .. } => Some(*network),
                _ => None,
            })
            .collect();
        (prints, rec.network_batches)
    };
    let (from_real, batches_real) = networks(InitStrategy::RandomReal);
    let (from_noise, batches_noise) = networks(InitStrategy::Noise);
    assert_eq!(from_real, from_noise);
    assert_eq!(batches_real, batches_noise);
    assert_eq!(batches_real.len(), cfg.outer_loops * cfg.inner_epochs);
    assert!(batches_real.iter().flatten().all(|&i| i < data.train.len()));
}

#[test]
fn disabled_freezing_never_freezes() {
    let data = toy();
    let mut cfg = config(4);
    cfg.freezing_enabled = false;
    let syn = init_synthetic(&data.train, cfg.ipc, cfg.seed, cfg.init).unwrap();
    let mut rec = Recorder::default();
    condense_from(&cfg, &data.train, syn, &mut rec).unwrap();
    assert!(rec.scopes.iter().all(|s| *s == UpdateScope::Full));
}

#[test]
fn gradient_selection_metric_costs_a_pass_per_subset() {
    let data = toy();
    let mut cfg = config(4);
    cfg.selection_metric = SelectionMetric::GradientDistance;
    let out = condense(&cfg, &data.train).unwrap();
    // Checkpoints at t = 1, 2, 4, 6, each over every inner epoch.
    let measured = 4 * cfg.inner_epochs;
    assert_eq!(out.passes.forward_synthetic, measured * (cfg.ipc - 1));
    assert_eq!(out.passes.backward_synthetic, measured * (cfg.ipc - 1));
    assert_eq!(out.passes.forward_real, measured);

    cfg.selection_metric = SelectionMetric::FeatureDistance;
    let out = condense(&cfg, &data.train).unwrap();
    assert_eq!(out.passes.forward_synthetic, measured);
    assert_eq!(out.passes.backward_synthetic, 0);
}

#[test]
fn basic_condensation_does_not_lose_to_its_initialization() {
    let data = toy();
    let mut gain = 0.0;
    for seed in 0..3 {
        let mut cfg = config(4);
        cfg.seed = seed;
        let mut ecfg = EvalConfig::desk(cfg.network.clone());
        ecfg.epochs = 60;
        ecfg.seed = seed;
        let init = init_synthetic(&data.train, cfg.ipc, seed, cfg.init).unwrap();
        let learned = condense_basic(&cfg, &data.train).unwrap();
        let acc = |s| {
            evaluate_all_subsets("m", s, &[cfg.ipc], &data.test, &ecfg)
                .unwrap()
                .rows[0]
                .mean
        };
        gain += acc(&learned) - acc(&init);
    }
    assert!(
        gain >= 0.0,
        "condensed minus init accuracy summed over seeds: {gain}"
    );
}
