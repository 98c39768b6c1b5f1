//! Run-directory plumbing shared by every subcommand: config resolution,
//! output layout, and the provenance manifest.

use crate::{commands, Cli, Command};
use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use maskedembed::config::{self, ENV_PREFIX};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Version stamp baked in at compile time (git describe when available).
pub const BUILD_VERSION: &str = env!("BUILD_VERSION");

/// Provenance record written beside every run's artifacts.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    threads: Option<usize>,
    /// Name of the echoed-config file inside the run directory.
    config_file: String,
    started_utc: String,
    wall_time_s: f64,
    status: String,
}

/// Resolves the configuration (file or defaults, plus `ME_` environment
/// overrides), creates a fresh run directory with the config echoed into it,
/// dispatches the subcommand, and records the manifest whether it succeeded
/// or not.
pub fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }

    let mut vars: Vec<(String, String)> = std::env::vars()
        .filter(|(key, _)| key.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    let cfg = match &cli.config {
        Some(path) => config::load_with_overrides(path, &vars)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => {
            config::from_text_with_overrides("", &vars).context("building default config")?
        }
    };

    let tag = command_tag(&cli.command);
    let dir = create_run_dir(&cli.out, tag)?;
    std::fs::create_dir(dir.join("results")).context("creating results directory")?;
    let echo = config::to_toml_string(&cfg)?;
    std::fs::write(dir.join("config.toml"), echo).context("echoing config")?;
    println!("run directory: {}", dir.display());

    let started = Utc::now();
    let clock = Instant::now();
    let outcome = commands::dispatch(&cli, &cfg, &dir);
    let manifest = RunManifest {
        command: tag.to_string(),
        version: BUILD_VERSION.to_string(),
        seed: cli.seed,
        threads: cli.threads,
        config_file: "config.toml".to_string(),
        started_utc: started.to_rfc3339_opts(SecondsFormat::Secs, true),
        wall_time_s: clock.elapsed().as_secs_f64(),
        status: if outcome.is_ok() { "success" } else { "failed" }.to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json + "\n").context("writing run manifest")?;
    outcome
}

fn command_tag(command: &Command) -> &'static str {
    match command {
        Command::Synth => "synth",
        Command::Train => "train",
        Command::EvalVerify { .. } => "eval-verify",
        Command::EvalDiar { .. } => "eval-diar",
        Command::SweepM { .. } => "sweep-m",
        Command::Gradcheck { .. } => "gradcheck",
        Command::Selfcheck { .. } => "selfcheck",
    }
}

/// Creates `out/<UTC timestamp>-<tag>`, appending `-2`, `-3`, … when two runs
/// start within the same second.
fn create_run_dir(out: &Path, tag: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let stamp = Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{tag}");
    for attempt in 1u64.. {
        let name = if attempt == 1 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(e).with_context(|| format!("creating run dir {}", dir.display()))
            }
        }
    }
    unreachable!("run-directory attempts exhausted")
}
