//! Command-line front end: precompute plans, train, segment, evaluate,
//! benchmark and generate synthetic scenes.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig, Scheme};
pub use error::{CliError, ErrorCode};

#[derive(Debug, Parser)]
#[command(name = "tangentconv", version, about = "Tangent-convolution point cloud segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Sequential reductions everywhere, for byte-stable outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Interpolation scheme for the selection plans.
    #[arg(long, global = true, value_parser = parse_scheme)]
    pub scheme: Option<Scheme>,
    /// Neighbors per pixel for the gaussian scheme.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Input signals, e.g. DHN or DHNRGB.
    #[arg(long, global = true)]
    pub signals: Option<String>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "nn" => Ok(Scheme::Nn),
        "gaussian" => Ok(Scheme::Gaussian),
        _ => Err(format!("unknown scheme {s:?} (nn or gaussian)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and cache the plan hierarchy of a cloud.
    Precompute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also time a half-size subsample and print the ratio.
        #[arg(long)]
        check_scaling: bool,
    },
    /// Train on labeled clouds; resumable from the checkpoint.
    Train {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for loss.csv and run.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Label every point of a cloud.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Plan cache built by `precompute` for this input.
        #[arg(long)]
        plans: Option<PathBuf>,
    },
    /// Score predicted labels against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Directory for confusion.csv and classes.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Report preprocessing time, forward-pass time and peak memory.
    Benchmark {
        #[arg(long)]
        input: PathBuf,
        /// Trained weights; a freshly initialized network otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also time precompute on 1/4, 1/2 and all of the points.
        #[arg(long)]
        scaling: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic labeled scene.
    GenScene {
        #[arg(long)]
        output: PathBuf,
        /// Scene description (TOML); a furnished room otherwise.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Layout seed of the room.
        #[arg(long, default_value_t = 0)]
        room: u64,
        /// Gaussian noise, meters.
        #[arg(long)]
        noise: Option<f64>,
    },
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            deterministic: self.deterministic,
            scheme: self.scheme,
            k: self.k,
            signals: self.signals.clone(),
            classes: self.classes,
            epochs: self.epochs,
            lr: self.lr,
        }
    }
}

/// Resolve the configuration, set up threading, run the subcommand.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = cli.common.overrides().apply(RunConfig::load(cli.common.config.as_deref())?);
    cfg.validate()?;
    setup_threads(&cfg);
    tangentconv::par::set_sequential(cfg.deterministic);
    commands::dispatch(&cfg, &cli.command, out)
}

fn setup_threads(cfg: &RunConfig) {
    #[cfg(feature = "parallel")]
    if cfg.threads > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if cfg.threads > 1 {
        log::warn!("built without the parallel feature; running on one thread");
    }
}
