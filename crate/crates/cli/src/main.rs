//! `maskedembed` — command-line driver for synthesis, training, evaluation,
//! duration sweeps, and self-checks.
//!
//! Every invocation creates one `<out>/<timestamp>-<command>/` directory
//! holding the fully-echoed configuration, a provenance manifest (seed,
//! build version, wall time, status), and the command's artifacts under
//! `results/`. Exit code 0 means full success, 1 a failed run or property
//! check (the failing property is named on stderr), and 2 a usage error.

mod commands;
mod run;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Masked speaker-embedding toolkit: synthesis, training, evaluation, checks.
#[derive(Debug, Parser)]
#[command(name = "maskedembed", version = run::BUILD_VERSION)]
pub struct Cli {
    /// Run configuration file (TOML); built-in defaults otherwise. Any
    /// setting can be overridden via `ME_SECTION__FIELD=value` variables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; all randomness derives deterministically from it.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Directory that receives one `<timestamp>-<command>` run folder.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a verification dataset: features, RTTM, manifest, trial list.
    Synth,
    /// Train a model; writes per-cycle checkpoints and a step-metrics log.
    Train,
    /// Score verification trials with a trained model and report per-bucket EER.
    EvalVerify {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Second checkpoint to compare against via paired bootstrap.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Trial list written by `synth`; defaults to synthesizing in memory.
        #[arg(long, requires = "manifest")]
        trials: Option<PathBuf>,
        /// Dataset manifest written by `synth`; required alongside --trials.
        #[arg(long, requires = "trials")]
        manifest: Option<PathBuf>,
    },
    /// Diarize synthetic conversations with a trained model and report DER.
    EvalDiar {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
    },
    /// Rescale non-target duration by each factor m and report cosine/EER rows.
    SweepM {
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated duration factors (default: eval.m_values from config).
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<f64>>,
    },
    /// Finite-difference gradient checks over every differentiable layer.
    Gradcheck {
        /// Randomized cases per property.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Masking property suites: guided-vs-unguided reduction and independence.
    Selfcheck {
        /// Randomized cases per property.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help / --version.
        Err(e) => e.exit(),
    };
    match run::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
