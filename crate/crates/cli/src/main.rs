//! `mdc`: condense, build baselines, evaluate and tabulate.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdc_core::evaluation::BaselineKind;
use mdc_core::Precision;

use commands::Method;
use config::RunConfig;
use error::Result;

#[derive(Parser)]
#[command(
    name = "mdc",
    version,
    about = "Multisize dataset condensation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condense the configured dataset into one multisize synthetic set.
    Condense {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "mdc")]
        method: Method,
        /// Output directory (overrides MDC_OUT_DIR and the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build baseline A, B or C from plain condensation runs.
    Baseline {
        config: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: BaselineKind,
        /// Largest size; defaults to the configured images per class.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train fresh networks on every requested subset size and record test accuracy.
    Evaluate {
        /// Condensed files, baseline manifests, or run directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sizes; defaults to every size the input holds.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Row name in the report (single input only).
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge aggregated CSVs into a markdown accuracy table.
    Report {
        /// Run directories or aggregated CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write `method,size,accuracy` curve data here.
        #[arg(long)]
        series: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<BaselineKind, String> {
    s.parse().map_err(|e: mdc_core::Error| e.to_string())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Condense {
            config,
            method,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cfg.output_dir(out.as_deref());
            with_precision!(cfg, cmd_condense(&cfg, method, &dir))?;
            println!("{}", dir.display());
        }
        Command::Baseline {
            config,
            kind,
            target,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cfg.output_dir(out.as_deref());
            with_precision!(cfg, cmd_baseline(&cfg, kind, target, &dir))?;
            println!("{}", dir.display());
        }
        Command::Evaluate {
            inputs,
            config,
            sizes,
            method,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cfg.output_dir(out.as_deref());
            let report = with_precision!(
                cfg,
                cmd_evaluate(&cfg, &inputs, sizes.as_deref(), method.as_deref(), &dir)
            )?;
            for r in &report.rows {
                let std = r.std.map_or(String::new(), |s| format!(" ± {s:.2}"));
                println!("{} size {}: {:.2}{std}", r.method, r.size, r.mean);
            }
        }
        Command::Report {
            inputs,
            out,
            series,
        } => {
            print!(
                "{}",
                commands::cmd_report(&inputs, out.as_deref(), series.as_deref())?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
