//! `emutune`: run the fine-tuning experiment or any single step of it.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid configuration or inputs,
//! 3 failure while computing.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "emutune", version, about = "Curriculum fine-tuning of a toy forecast emulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configuration's root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the worker count.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override the run directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Smoke,
    Reference,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum System {
    A,
    B,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a preset configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "smoke")]
        preset: Preset,
        /// Destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the System A and System B archives.
    GenData,
    /// Compute normalization statistics of both systems over the training period.
    ComputeNorms,
    /// Compare two sets of normalization statistics.
    CompareNorms {
        /// Defaults to the run's System A statistics.
        #[arg(long)]
        a: Option<PathBuf>,
        /// Defaults to the run's System B statistics.
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constant-rate probes of one stage from a checkpoint.
    LrSearch {
        #[arg(long)]
        stage: String,
        /// Checkpoint file or the name of a checkpoint in the run directory.
        #[arg(long)]
        checkpoint: String,
        /// Candidate rates; defaults to the configuration's.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configured stage from a checkpoint.
    TrainStage {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        checkpoint: String,
        /// Override the stage's peak learning rate.
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive vertical level weights from perturbation sensitivity.
    SensitivityWeights {
        #[arg(long, default_value = "1a")]
        checkpoint: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        /// Defaults to a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient agreement of split-horizon training with the unsplit gradient.
    SplitHorizonDiag {
        #[arg(long)]
        checkpoint: String,
        /// Stage whose horizon and loss are used; defaults to the last one.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long, default_value_t = 40)]
        windows: usize,
        /// Segment lengths such as `4+8`; repeatable. Defaults to the
        /// unsplit horizon, every two-segment split and all single steps.
        #[arg(long = "split")]
        splits: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// RMSE and ACC over the test period.
    Evaluate {
        /// `LABEL=CHECKPOINT`; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long, value_enum, default_value = "b")]
        system: System,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spectral variance ratio and coherence over the test period.
    Spectra {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long, value_enum, default_value = "b")]
        system: System,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative skill of one checkpoint over another.
    Scorecard {
        #[arg(long)]
        candidate: String,
        #[arg(long, default_value = "pretrained")]
        reference: String,
        #[arg(long, value_enum, default_value = "b")]
        system: System,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The whole experiment, resuming from completed steps.
    Pipeline {
        /// Stop after the named step.
        #[arg(long)]
        stop_after: Option<String>,
    },
}

/// Missing or contradictory arguments that clap cannot detect.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        1
    } else if err.downcast_ref::<emutune_core::Error>().is_some_and(|e| e.is_validation()) {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
