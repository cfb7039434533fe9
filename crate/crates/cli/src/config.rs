//! Run configuration: a sparse TOML file resolved against desk defaults.
//!
//! Only `[data]` is required. `[condensation]` and `[evaluation]` override
//! individual fields (nested tables merge key by key). The resolved config is
//! complete and reloads to itself.

use std::path::{Path, PathBuf};

use mdc_core::condense::CondensationConfig;
use mdc_core::datasets::{load_real, RealSource};
use mdc_core::evaluation::EvalConfig;
use mdc_core::Precision;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "MDC_OUT_DIR";

pub const DEFAULT_IPC: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into both sections.
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub data: RealSource,
    pub condensation: CondensationConfig,
    pub evaluation: EvalConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_precision")]
    precision: Precision,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    data: RealSource,
    #[serde(default)]
    condensation: Table,
    #[serde(default)]
    evaluation: Table,
}

fn default_precision() -> Precision {
    Precision::F32
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve_data_path(source: RealSource, base: &Path) -> RealSource {
    let fix = |p: PathBuf| {
        if p.is_absolute() {
            p
        } else {
            let joined = base.join(&p);
            joined.canonicalize().unwrap_or(joined)
        }
    };
    match source {
        RealSource::Digits8x8 { path } => RealSource::Digits8x8 { path: fix(path) },
        RealSource::RawTensorFile { path } => RealSource::RawTensorFile { path: fix(path) },
        other => other,
    }
}

impl RunConfig {
    /// Reads and resolves a config file. Relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            CliError::Usage(reason) => CliError::Config {
                path: path.into(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
        let sparse: SparseConfig = toml::from_str(text).map_err(|e| bad(&e))?;
        let data = resolve_data_path(sparse.data, base);

        let real = load_real::<f32>(&data)?;
        let classes = real.train.num_classes;
        let shape = real.train.image_shape();

        let mut cond = Table::try_from(CondensationConfig::desk(shape, classes, DEFAULT_IPC))
            .map_err(|e| bad(&e))?;
        merge(&mut cond, sparse.condensation);
        let mut condensation: CondensationConfig = cond
            .try_into()
            .map_err(|e| bad(&format!("[condensation] {e}")))?;

        let mut eval =
            Table::try_from(EvalConfig::desk(condensation.network.clone())).map_err(|e| bad(&e))?;
        merge(&mut eval, sparse.evaluation);
        let mut evaluation: EvalConfig = eval
            .try_into()
            .map_err(|e| bad(&format!("[evaluation] {e}")))?;

        for (section, s) in [
            ("condensation", condensation.seed),
            ("evaluation", evaluation.seed),
        ] {
            if s != 0 && s != sparse.seed {
                return Err(CliError::Usage(format!(
                    "[{section}] seed {s} conflicts with the master seed {}; set the top-level seed instead",
                    sparse.seed
                )));
            }
        }
        condensation.seed = sparse.seed;
        evaluation.seed = sparse.seed;
        condensation.validate()?;
        evaluation.validate()?;

        Ok(Self {
            seed: sparse.seed,
            precision: sparse.precision,
            out_dir: sparse.out_dir,
            data,
            condensation,
            evaluation,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(e.to_string()))
    }

    /// `--out`, then the environment override, then the configured directory.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GAUSS: &str = r#"
seed = 5
[data]
kind = "gaussians"
classes = 3
per_class = 12
test_per_class = 4
shape = [1, 4, 4]
separation = 2.0
seed = 1
"#;

    #[test]
    fn sparse_config_takes_desk_defaults() {
        let cfg = RunConfig::from_toml(GAUSS, Path::new(".")).unwrap();
        let desk = CondensationConfig {
            seed: 5,
            ..CondensationConfig::desk([1, 4, 4], 3, DEFAULT_IPC)
        };
        assert_eq!(cfg.condensation, desk);
        assert_eq!(cfg.evaluation.network, desk.network);
        assert_eq!(cfg.evaluation.seed, 5);
        assert_eq!(cfg.precision, Precision::F32);
    }

    #[test]
    fn overrides_merge_into_nested_tables() {
        let text = format!(
            "{GAUSS}\n[condensation]\nipc = 3\nouter_loops = 2\nselection_period = 1\n[condensation.network]\nwidth = 5\n[evaluation]\nepochs = 7\n"
        );
        let cfg = RunConfig::from_toml(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.condensation.ipc, 3);
        assert_eq!(cfg.condensation.network.width, 5);
        assert_eq!(cfg.condensation.network.depth, 2);
        assert_eq!(cfg.evaluation.network.width, 5);
        assert_eq!(cfg.evaluation.epochs, 7);
    }

    #[test]
    fn resolved_config_reloads_to_itself() {
        let cfg = RunConfig::from_toml(GAUSS, Path::new(".")).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new(".")).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_seed_conflicts_are_rejected() {
        let typo = format!("{GAUSS}\n[condensation]\nouter_loop = 3\n");
        assert!(matches!(
            RunConfig::from_toml(&typo, Path::new(".")),
            Err(CliError::Usage(_))
        ));
        let conflict = format!("{GAUSS}\n[evaluation]\nseed = 9\n");
        assert!(RunConfig::from_toml(&conflict, Path::new(".")).is_err());
        let invalid = format!("{GAUSS}\n[condensation]\nselection_period = 50\n");
        assert_eq!(
            RunConfig::from_toml(&invalid, Path::new("."))
                .unwrap_err()
                .exit_code(),
            2
        );
    }
}
