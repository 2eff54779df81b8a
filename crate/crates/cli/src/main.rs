//! `epistemic`: experiment runners writing CSV (and optional SVG) results.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{BackendKind, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "epistemic",
    version,
    about = "Epistemic uncertainty experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--grid convergence.ns=[2,4]`. Repeatable.
    #[arg(long = "grid", global = true, value_name = "KEY=VALUE")]
    grid: Vec<String>,
    /// Also write SVG line charts.
    #[arg(long, global = true)]
    svg: bool,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Estimator vs exact MI on synthetic Gibbs distributions.
    SynthConvergence,
    /// Missing-mass bounds, concentration trials and certificate coverage.
    MissingMass,
    /// Score a dataset, calibrate abstention thresholds and evaluate.
    CalibrateEvaluate {
        /// JSON-lines dataset of {query, answers, tag}.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON list of synthetic oracle entries for the dataset.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Normalized target probability as a competing answer is repeated.
    Amplify,
    /// Single attention head with a repeated statement.
    AttentionDemo,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.grid)?.with_seed(cli.seed);
    if let Some(b) = cli.backend {
        cfg.backend.kind = b;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    cfg.svg |= cli.svg;
    if let Command::CalibrateEvaluate { dataset, oracle } = &cli.command {
        if dataset.is_some() {
            cfg.dataset.path.clone_from(dataset);
        }
        if oracle.is_some() {
            cfg.backend.oracle.clone_from(oracle);
        }
    }
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let run = commands::Run {
        cfg: &cfg,
        out: &out,
    };
    let written = match cli.command {
        Command::SynthConvergence => commands::synth_convergence(&run)?,
        Command::MissingMass => commands::missing_mass(&run)?,
        Command::CalibrateEvaluate { .. } => commands::calibrate(&run)?,
        Command::Amplify => commands::amplify(&run)?,
        Command::AttentionDemo => commands::attention_demo(&run)?,
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<epistemic_core::Error>() {
            use epistemic_core::Error as E;
            return match e {
                E::Http { .. } => "http",
                E::MalformedResponse(_) => "malformed_response",
                E::Capability(_) => "capability",
                E::UnknownQuery(_) => "unknown_query",
                E::Json(_) => "parse",
                E::Io(_) => "io",
                _ => "invalid_input",
            };
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "invalid_input"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().map(ToString::to_string).collect();
            let body = json!({"error": {"kind": error_kind(&err), "message": chain.join(": "), "causes": chain}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
