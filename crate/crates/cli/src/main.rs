//! `retrofit`: train, evaluate and apply retrofitting networks.

mod checkpoint;
mod commands;
mod config;
mod error;
mod figure;
mod gradcheck;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conformal_retrofit::data::Split;
use conformal_retrofit::fixtures::{FixtureConfig, FixtureKind};
use conformal_retrofit::losses::Variant;
use conformal_retrofit::Manifold;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "retrofit", version, about = "Retrofit embeddings onto Riemannian manifolds")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report mAP of a checkpoint (or of the raw embeddings) on a split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the untransformed embeddings under cosine distance.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Map a GloVe-style embedding file through a checkpoint.
    Transform {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on a synthetic planar fixture and write plot-ready CSV.
    FigureData {
        #[arg(long)]
        which: FixtureKind,
        #[arg(long, default_value = "conformal")]
        variant: VariantArg,
        #[arg(long, default_value = "E2")]
        target: Manifold,
        /// JSON fixture settings; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a train/val/test node split for an edge list.
    Split {
        #[arg(long)]
        edges: PathBuf,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic derivatives with finite differences.
    CheckGrad {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        points: usize,
        #[arg(long, default_value_t = 16)]
        entries: usize,
        #[arg(long, hide = true, default_value_t = 1.0)]
        tanh_fault: f64,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum VariantArg {
    Standard,
    Explicit,
    Conformal,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => Variant::Standard,
            VariantArg::Explicit => Variant::Explicit,
            VariantArg::Conformal => Variant::Conformal,
        }
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, seed, out } => print_json(&commands::train(&config, seed, out)?),
        Command::Evaluate {
            config,
            checkpoint,
            identity: _,
            split,
        } => print_json(&commands::evaluate(&config, checkpoint.as_deref(), split)?),
        Command::Transform { checkpoint, input, output } => print_json(&commands::transform(&checkpoint, &input, &output)?),
        Command::FigureData {
            which,
            variant,
            target,
            config,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str::<FixtureConfig>(&text)?
                }
                None => FixtureConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print_json(&figure::figure_data(which, variant.into(), target, cfg, &out)?)
        }
        Command::Split { edges, ratios, seed, out } => {
            let r = commands::parse_ratios(&ratios)?;
            print_json(&commands::split(&edges, r, seed, &out)?)
        }
        Command::CheckGrad {
            config,
            seed,
            points,
            entries,
            tanh_fault,
        } => {
            let opts = gradcheck::GradCheckOptions {
                seed,
                points,
                entries,
                tanh_fault,
            };
            let report = gradcheck::check_grad(config.as_deref(), &opts)?;
            for b in &report.blocks {
                println!(
                    "{:<24} max_rel_err {:.3e} tol {:.0e} {}",
                    b.name,
                    b.max_rel_err,
                    b.tol,
                    if b.passed { "ok" } else { "FAILED" }
                );
            }
            if !report.passed {
                return Err(CliError::Numerical(format!("gradient check failed for {}", report.architecture)));
            }
            println!("gradient check passed for {}", report.architecture);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
