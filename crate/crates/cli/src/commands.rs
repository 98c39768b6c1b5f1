//! Subcommand implementations. Each writes its artifacts under the run
//! directory's `results/` folder and prints a one-line summary per result.

use crate::{Cli, Command};
use anyhow::{bail, Context, Result};
use maskedembed::checks::{self, CheckResult};
use maskedembed::config::RunConfig;
use maskedembed::encoder::checkpoint::load_checkpoint;
use maskedembed::eval::{self, BucketEer, TrialListLine};
use maskedembed::features::rttm::write_rttm;
use maskedembed::rng::Prng;
use maskedembed::synth::dataset::{build_trial_set, Trial, TrialSet};
use maskedembed::synth::manifest::{
    export_mixtures, load_mixture, read_manifest, write_manifest, ManifestRecord,
};
use maskedembed::synth::{synth_conversation, synth_speaker_bank, Mixture, OverlapBucket};
use maskedembed::train::train_run;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

/// Seed streams, so each pipeline stage draws independent randomness and
/// commands that synthesize the same data (synth, eval-verify, sweep-m)
/// agree exactly.
const BANK_STREAM: u64 = 0xE7A1;
const TRIAL_STREAM: u64 = 0x7517;
const CONV_STREAM: u64 = 0xC04F;
const BOOTSTRAP_STREAM: u64 = 0xB007;
const GRAD_STREAM: u64 = 0x06AD;
const REDUCTION_STREAM: u64 = 0x2ED0;
const INDEPENDENCE_STREAM: u64 = 0x1DE9;

fn subseed(seed: u64, stream: u64) -> u64 {
    let mut rng = Prng::derive(seed, stream);
    rng.next_u64()
}

/// Routes a parsed invocation to its implementation.
pub fn dispatch(cli: &Cli, cfg: &RunConfig, dir: &Path) -> Result<()> {
    match &cli.command {
        Command::Synth => synth_cmd(cfg, cli.seed, dir),
        Command::Train => train_cmd(cfg, cli.seed, dir),
        Command::EvalVerify {
            model,
            compare,
            trials,
            manifest,
        } => eval_verify_cmd(
            cfg,
            cli.seed,
            dir,
            model,
            compare.as_deref(),
            trials.as_deref(),
            manifest.as_deref(),
        ),
        Command::EvalDiar { model } => eval_diar_cmd(cfg, cli.seed, dir, model),
        Command::SweepM { model, m } => sweep_m_cmd(cfg, cli.seed, dir, model, m.as_deref()),
        Command::Gradcheck { cases } => gradcheck_cmd(cli.seed, dir, *cases),
        Command::Selfcheck { cases } => selfcheck_cmd(cli.seed, dir, *cases),
    }
}

/// Builds the evaluation trial set and exports it: feature files, RTTM
/// files, a dataset manifest (one record per mixture), and a trial list.
fn synth_cmd(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    let set = synth_trials(cfg, seed)?;
    let results = dir.join("results");
    let n = set.trials.len();
    // Enrollment clips first, then test mixtures, so record i pairs with
    // record n+i.
    let mut mixtures: Vec<Mixture> = Vec::with_capacity(2 * n);
    mixtures.extend(set.trials.iter().map(|t| t.enroll.clone()));
    mixtures.extend(set.trials.iter().map(|t| t.test.clone()));
    let records = export_mixtures(&results, &mixtures)?;
    write_manifest(&results.join("dataset.jsonl"), &records)?;
    let lines: Vec<TrialListLine> = set
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| TrialListLine {
            same_speaker: t.same_speaker,
            enroll_path: records[i].features.clone(),
            test_id: file_stem(&records[n + i].features),
        })
        .collect();
    let mut w = BufWriter::new(File::create(results.join("trials.txt"))?);
    eval::write_trial_list(&mut w, &lines)?;
    w.flush()?;
    println!(
        "synthesized {n} trials over {} speakers into {}",
        cfg.data.trials.n_speakers,
        results.display()
    );
    Ok(())
}

/// Trains per the config, then records a small summary beside the
/// checkpoints and metrics log the training loop itself writes.
fn train_cmd(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<()> {
    let report = train_run(&cfg.model, &cfg.train, &cfg.data.synth, seed, dir)?;
    let checkpoint = report
        .checkpoint
        .strip_prefix(dir)
        .unwrap_or(&report.checkpoint)
        .to_path_buf();
    let summary = serde_json::json!({
        "final_train_accuracy": report.final_train_accuracy,
        "steps": report.metrics.len(),
        "final_loss": report.metrics.last().map(|m| m.loss),
        "checkpoint": checkpoint,
    });
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(dir.join("results").join("train.json"), json + "\n")?;
    println!(
        "trained {} steps: final accuracy {:.4}, checkpoint {}",
        report.metrics.len(),
        report.final_train_accuracy,
        checkpoint.display()
    );
    Ok(())
}

/// Scores verification trials (from `synth` output files, or synthesized in
/// memory with the same streams `synth` uses) and writes per-bucket EER;
/// with `--compare`, adds a paired-bootstrap comparison of the two models.
fn eval_verify_cmd(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    model_path: &Path,
    compare: Option<&Path>,
    trials_path: Option<&Path>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let set = match (trials_path, manifest_path) {
        (Some(t), Some(m)) => load_trials_from_files(t, m)?,
        (None, None) => synth_trials(cfg, seed)?,
        // clap's `requires` links the two flags.
        _ => unreachable!("--trials and --manifest come as a pair"),
    };
    let scores = eval::score_trials(&model, &set)?;
    let mut rows = eval::eer_by_bucket(&scores)?;
    let overall = eval::compute_eer(&scores)?;
    rows.push(BucketEer {
        bucket: "all".to_string(),
        eer: overall.eer,
        threshold: overall.threshold,
    });
    let results = dir.join("results");
    let mut w = BufWriter::new(File::create(results.join("eer.csv"))?);
    eval::write_eer_csv(&mut w, &rows)?;
    w.flush()?;
    for row in &rows {
        println!(
            "bucket {:>8}: EER {:.4} at threshold {:+.4}",
            row.bucket, row.eer, row.threshold
        );
    }
    if let Some(other_path) = compare {
        let (other, _) = load_checkpoint(other_path)
            .with_context(|| format!("loading checkpoint {}", other_path.display()))?;
        let other_scores = eval::score_trials(&other, &set)?;
        let outcome = eval::bootstrap_compare(
            &scores,
            &other_scores,
            cfg.eval.n_resamples,
            subseed(seed, BOOTSTRAP_STREAM),
        )?;
        let json = serde_json::to_string_pretty(&outcome)?;
        std::fs::write(results.join("bootstrap.json"), json + "\n")?;
        println!(
            "bootstrap: EER {:.4} vs {:.4}, diff {:+.4}, p = {:.4}",
            outcome.eer_a, outcome.eer_b, outcome.observed_diff, outcome.p_value
        );
    }
    Ok(())
}

/// Synthesizes conversations, diarizes each with the model, and reports
/// per-conversation and mean DER plus the combined hypothesis RTTM.
fn eval_diar_cmd(cfg: &RunConfig, seed: u64, dir: &Path, model_path: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let conv = &cfg.eval.conversations;
    let conv_seed = subseed(seed, CONV_STREAM);
    let mut all_rttm = Vec::new();
    let mut report = String::new();
    let mut ders = Vec::with_capacity(conv.count);
    for i in 0..conv.count {
        let mut rng = Prng::derive(conv_seed, i as u64);
        let bank = synth_speaker_bank(rng.next_u64(), conv.speakers, &cfg.data.synth)?;
        let refs: Vec<_> = bank.iter().collect();
        let (features, annotation) =
            synth_conversation(&refs, conv.turns, &cfg.data.synth, &mut rng)?;
        let hyp = eval::run_diarization(&model, &features, &annotation, &cfg.eval.diar)?;
        let der = eval::compute_der(&annotation, &hyp)?;
        let recording = format!("conv{i:03}");
        all_rttm.extend(eval::hypothesis_to_rttm(&hyp, &recording));
        report.push_str(&format!("[{recording}]\n{}\n", eval::format_der_summary(&der)));
        ders.push(der.der);
    }
    let results = dir.join("results");
    let mut w = BufWriter::new(File::create(results.join("hypotheses.rttm"))?);
    write_rttm(&mut w, &all_rttm)?;
    w.flush()?;
    let mean = ders.iter().sum::<f64>() / ders.len() as f64;
    let mean_line = format!("mean DER over {} conversations: {:.6}", ders.len(), mean);
    report.push_str(&mean_line);
    report.push('\n');
    std::fs::write(results.join("der.txt"), report)?;
    println!("{mean_line}");
    Ok(())
}

/// Rescales non-target duration by each factor and writes one CSV row per
/// factor with the mean same-speaker cosine and the EER.
fn sweep_m_cmd(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    model_path: &Path,
    m_flag: Option<&[f64]>,
) -> Result<()> {
    let (model, _) = load_checkpoint(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let m_values: Vec<f64> = match m_flag {
        Some(values) => {
            anyhow::ensure!(!values.is_empty(), "--m needs at least one value");
            for &m in values {
                anyhow::ensure!(
                    m.is_finite() && m >= 0.0,
                    "--m values must be finite and non-negative, got {m}"
                );
            }
            values.to_vec()
        }
        None => cfg.eval.m_values.clone(),
    };
    let set = synth_trials(cfg, seed)?;
    let rows = eval::sweep_nontarget_duration(&model, &set, &m_values)?;
    let results = dir.join("results");
    let mut w = BufWriter::new(File::create(results.join("sweep.csv"))?);
    eval::write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    for row in &rows {
        let cosine = row
            .mean_cosine
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "NA".to_string());
        let eer = row
            .eer
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "NA".to_string());
        println!("m = {:>5}: mean cosine {cosine}, EER {eer}", row.m);
    }
    Ok(())
}

/// Finite-difference gradient checks; exits nonzero naming the first
/// failing property.
fn gradcheck_cmd(seed: u64, dir: &Path, cases: usize) -> Result<()> {
    anyhow::ensure!(cases > 0, "--cases must be positive");
    let results = checks::gradient_suite(cases, subseed(seed, GRAD_STREAM))?;
    finish_checks(dir, &results)
}

/// Reduction and masked-independence property suites; exits nonzero naming
/// the first failing property.
fn selfcheck_cmd(seed: u64, dir: &Path, cases: usize) -> Result<()> {
    anyhow::ensure!(cases > 0, "--cases must be positive");
    let mut results = checks::reduction_suite(cases, subseed(seed, REDUCTION_STREAM))?;
    results.extend(checks::independence_suite(
        cases,
        subseed(seed, INDEPENDENCE_STREAM),
    )?);
    finish_checks(dir, &results)
}

/// Prints one line per property, records them as JSON, and fails naming the
/// first violated property.
fn finish_checks(dir: &Path, results: &[CheckResult]) -> Result<()> {
    for r in results {
        println!("{}", r.summary_line());
    }
    let json = serde_json::to_string_pretty(results)?;
    std::fs::write(dir.join("results").join("checks.json"), json + "\n")?;
    if let Some(fail) = checks::first_failure(results) {
        bail!("failing property: {}", fail.property);
    }
    Ok(())
}

/// Synthesizes the evaluation trial set deterministically from the master
/// seed — identical to what `synth` exports for the same config and seed.
fn synth_trials(cfg: &RunConfig, seed: u64) -> Result<TrialSet> {
    let bank = synth_speaker_bank(
        subseed(seed, BANK_STREAM),
        cfg.data.trials.n_speakers,
        &cfg.data.synth,
    )?;
    let set = build_trial_set(
        &bank,
        &cfg.data.trials,
        &cfg.data.synth,
        subseed(seed, TRIAL_STREAM),
    )?;
    Ok(set)
}

/// Reassembles a trial set from the manifest and trial list `synth` wrote.
fn load_trials_from_files(trials_path: &Path, manifest_path: &Path) -> Result<TrialSet> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut by_path: HashMap<&str, &ManifestRecord> = HashMap::new();
    let mut by_stem: HashMap<String, &ManifestRecord> = HashMap::new();
    for r in &records {
        by_path.insert(r.features.as_str(), r);
        by_stem.insert(file_stem(&r.features), r);
    }
    let lines = eval::parse_trial_list(BufReader::new(File::open(trials_path)?))?;
    let mut trials = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let enroll_rec = by_path.get(line.enroll_path.as_str()).with_context(|| {
            format!("trial {i}: enrollment `{}` not in manifest", line.enroll_path)
        })?;
        let test_rec = by_stem
            .get(&line.test_id)
            .with_context(|| format!("trial {i}: test id `{}` not in manifest", line.test_id))?;
        let enroll = load_mixture(&base, enroll_rec)?;
        let test = load_mixture(&base, test_rec)?;
        let bucket = OverlapBucket::of_ratio(test.overlap_ratio);
        trials.push(Trial {
            id: format!("t{i:05}"),
            enroll_speaker: enroll.target_id.clone(),
            enroll,
            test,
            same_speaker: line.same_speaker,
            bucket,
        });
    }
    Ok(TrialSet { trials })
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}
