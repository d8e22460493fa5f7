use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Detect and repair corrupted steps in trajectory datasets.
#[derive(Debug, Parser)]
#[command(name = "adg", version)]
pub struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Oscillator,
    Lissajous,
    PiecewiseRamp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Family {
    UniformState,
    UniformFullElement,
    GaussianState,
    MissingZeroActions,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    SingleStep,
    ReverseChain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory dataset.
    Gen {
        #[arg(long, value_enum, default_value = "oscillator")]
        kind: Kind,
        #[arg(long, default_value_t = 40)]
        episodes: usize,
        #[arg(long, default_value_t = 250)]
        length: usize,
        #[arg(long, default_value_t = 5)]
        state_dim: usize,
        #[arg(long, default_value_t = 2)]
        action_dim: usize,
        #[arg(long, default_value_t = 1)]
        reward_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also export the dataset as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Inject corruption and store the ground-truth mask alongside.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "uniform-state")]
        family: Family,
        #[arg(long, default_value_t = 0.3)]
        rate: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ambient detector.
    TrainDetector {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// JSON-lines loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score every step and split at the threshold.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Train the denoiser on the steps a detection report kept.
    TrainDenoiser {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rewrite the steps a detection report flagged.
    Recover {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection, denoiser training and recovery in one run.
    Pipeline {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Clean dataset for reporting recovery error.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        single_model: bool,
    },
    /// Evaluate recovery error over several thresholds with one detector.
    SweepZeta {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5")]
        zetas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// False-negative curves of ambient detectors and the naive baseline.
    CompareDetectors {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "15,30,50")]
        k_a: Vec<usize>,
        #[arg(long)]
        naive: bool,
        #[arg(long, default_value_t = 250)]
        eval_every: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward-gap and SNR table over the schedule.
    Theory {
        #[arg(long, default_value_t = 1.0)]
        iota: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 11)]
        n: usize,
        /// Gap threshold for the suggested ambient step.
        #[arg(long, default_value_t = 0.1)]
        c: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
