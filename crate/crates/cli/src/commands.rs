use std::fs;
use std::path::{Path, PathBuf};

use mdc_core::condense::{condense, Condensed};
use mdc_core::datasets::{load_real, SyntheticDataset};
use mdc_core::evaluation::{
    build_baseline, evaluate_all_subsets, Baseline, BaselineKind, EvaluationReport, SizedSource,
};
use mdc_core::persistence::{load_as, save};
use mdc_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{read_aggregated, AccuracyTable};

pub const DATASET_FILE: &str = "synthetic.mdc";
pub const LOG_FILE: &str = "log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PER_SEED_FILE: &str = "per_seed.csv";
pub const AGGREGATED_FILE: &str = "aggregated.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mdc,
    Basic,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Mdc => "mdc",
            Method::Basic => "basic",
        }
    }
}

/// What produced a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub method: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub ipc: usize,
}

/// Files written by one baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: BaselineKind,
    pub target: usize,
    pub stored_images_per_class: usize,
    pub files: Vec<ManifestEntry>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn prepare(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    write(&dir.join(CONFIG_FILE), cfg.to_toml()?)
}

fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| CliError::Usage(e.to_string()))
}

fn run_info(command: &str, method: &str, cfg: &RunConfig) -> RunInfo {
    RunInfo {
        command: command.into(),
        method: method.into(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

// ----- condense --------------------------------------------------------------

pub fn cmd_condense<T: Scalar>(cfg: &RunConfig, method: Method, out: &Path) -> Result<()> {
    prepare(out, cfg)?;
    let data = load_real::<T>(&cfg.data)?;
    let run_cfg = match method {
        Method::Mdc => cfg.condensation.clone(),
        Method::Basic => cfg.condensation.basic(),
    };
    eprintln!(
        "condensing ({}, {} images per class, seed {}) into {}",
        method.name(),
        run_cfg.ipc,
        cfg.seed,
        out.display()
    );
    let Condensed { synthetic, log, .. } = condense(&run_cfg, &data.train)?;
    save(&synthetic, out.join(DATASET_FILE))?;
    let mut text = Vec::new();
    log.write_jsonl(&mut text)?;
    write(&out.join(LOG_FILE), text)?;
    write(
        &out.join(RUN_FILE),
        to_toml(&run_info("condense", method.name(), cfg))?,
    )
}

// ----- baseline --------------------------------------------------------------

fn kind_name(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::A => "A",
        BaselineKind::B => "B",
        BaselineKind::C => "C",
    }
}

pub fn cmd_baseline<T: Scalar>(
    cfg: &RunConfig,
    kind: BaselineKind,
    target: Option<usize>,
    out: &Path,
) -> Result<()> {
    prepare(out, cfg)?;
    let data = load_real::<T>(&cfg.data)?;
    let target = target.unwrap_or(cfg.condensation.ipc);
    let name = kind_name(kind);
    eprintln!(
        "building baseline {name} up to {target} images per class into {}",
        out.display()
    );
    let baseline = build_baseline(kind, target, &cfg.condensation, &data.train)?;
    let mut files = Vec::new();
    for ds in baseline.datasets() {
        let file = match kind {
            BaselineKind::A => format!("baseline_{name}_ipc{}.mdc", ds.ipc),
            _ => format!("baseline_{name}.mdc"),
        };
        save(ds, out.join(&file))?;
        files.push(ManifestEntry { file, ipc: ds.ipc });
    }
    let manifest = Manifest {
        kind,
        target,
        stored_images_per_class: baseline.stored_images_per_class(),
        files,
    };
    write(&out.join(MANIFEST_FILE), to_toml(&manifest)?)?;
    write(
        &out.join(RUN_FILE),
        to_toml(&run_info("baseline", name, cfg))?,
    )
}

// ----- evaluate --------------------------------------------------------------

enum Source<T> {
    File(SyntheticDataset<T>),
    Baseline(Baseline<T>),
}

impl<T: Scalar> Source<T> {
    fn as_sized(&self) -> &dyn SizedSource<T> {
        match self {
            Source::File(d) => d,
            Source::Baseline(b) => b,
        }
    }
}

fn read_toml<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_manifest<T: Scalar>(path: &Path) -> Result<(String, Source<T>)> {
    let m: Manifest = read_toml(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut sets = Vec::with_capacity(m.files.len());
    for e in &m.files {
        let ds: SyntheticDataset<T> = load_as(dir.join(&e.file))?;
        if ds.ipc != e.ipc {
            return Err(CliError::Usage(format!(
                "{}: manifest says {} images per class, file has {}",
                e.file, e.ipc, ds.ipc
            )));
        }
        sets.push(ds);
    }
    let single = |mut sets: Vec<SyntheticDataset<T>>| {
        if sets.len() == 1 {
            Ok(sets.remove(0))
        } else {
            Err(CliError::Usage(format!(
                "{}: baseline {:?} must list exactly one file",
                path.display(),
                m.kind
            )))
        }
    };
    let baseline = match m.kind {
        BaselineKind::A => {
            if sets.iter().enumerate().any(|(i, d)| d.ipc != i + 1) {
                return Err(CliError::Usage(format!(
                    "{}: baseline A files must hold 1, 2, … images per class in order",
                    path.display()
                )));
            }
            Baseline::A(sets)
        }
        BaselineKind::B => Baseline::B(single(sets)?),
        BaselineKind::C => Baseline::C(single(sets)?),
    };
    Ok((kind_name(m.kind).into(), Source::Baseline(baseline)))
}

fn method_of_file(path: &Path) -> String {
    let info = path
        .parent()
        .map(|d| d.join(RUN_FILE))
        .filter(|p| p.exists())
        .and_then(|p| read_toml::<RunInfo>(&p).ok());
    match info {
        Some(i) if i.command == "condense" => i.method,
        _ => path
            .file_stem()
            .map_or("dataset".into(), |s| s.to_string_lossy().into_owned()),
    }
}

fn load_input<T: Scalar>(path: &Path) -> Result<(String, Source<T>)> {
    if path.is_dir() {
        let manifest = path.join(MANIFEST_FILE);
        if manifest.exists() {
            return load_manifest(&manifest);
        }
        return load_input(&path.join(DATASET_FILE));
    }
    if path.extension().is_some_and(|e| e == "toml") {
        return load_manifest(path);
    }
    Ok((method_of_file(path), Source::File(load_as(path)?)))
}

pub fn cmd_evaluate<T: Scalar>(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    sizes: Option<&[usize]>,
    method: Option<&str>,
    out: &Path,
) -> Result<EvaluationReport> {
    if method.is_some() && inputs.len() != 1 {
        return Err(CliError::Usage("--method needs exactly one input".into()));
    }
    let mut loaded = Vec::with_capacity(inputs.len());
    for p in inputs {
        loaded.push(load_input::<T>(p)?);
    }
    prepare(out, cfg)?;
    let data = load_real::<T>(&cfg.data)?;
    let mut report: Option<EvaluationReport> = None;
    for (name, source) in &loaded {
        let name = method.unwrap_or(name);
        let src = source.as_sized();
        let all: Vec<usize> = (1..=src.max_size()).collect();
        let sizes = sizes.unwrap_or(&all);
        eprintln!(
            "evaluating {name} at sizes {sizes:?} ({} repeats)",
            cfg.evaluation.repeats
        );
        let r = evaluate_all_subsets(name, src, sizes, &data.test, &cfg.evaluation)?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(r)?,
        });
    }
    let report = report.ok_or_else(|| CliError::Usage("no inputs to evaluate".into()))?;
    let mut per_seed = Vec::new();
    report.write_per_seed_csv(&mut per_seed)?;
    write(&out.join(PER_SEED_FILE), per_seed)?;
    let mut aggregated = Vec::new();
    report.write_aggregated_csv(&mut aggregated)?;
    write(&out.join(AGGREGATED_FILE), aggregated)?;
    Ok(report)
}

// ----- report ----------------------------------------------------------------

pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>, series: Option<&Path>) -> Result<String> {
    let mut rows = Vec::new();
    for p in inputs {
        let file = if p.is_dir() {
            p.join(AGGREGATED_FILE)
        } else {
            p.clone()
        };
        let f = fs::File::open(&file)
            .map_err(|e| CliError::io(format!("reading {}", file.display()), e))?;
        rows.extend(read_aggregated(f)?);
    }
    let table = AccuracyTable::from_rows(&rows)?;
    let md = table.to_markdown();
    if let Some(p) = out {
        write(p, &md)?;
    }
    if let Some(p) = series {
        write(p, table.series_csv()?)?;
    }
    Ok(md)
}
