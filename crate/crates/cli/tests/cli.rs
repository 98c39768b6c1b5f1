//! End-to-end tests driving the installed binary: exit codes, run-directory
//! layout, reproducibility, and agreement between file-based and in-memory
//! evaluation.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Command for the built binary with ambient `ME_` overrides scrubbed.
fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskedembed"));
    for (key, _) in std::env::vars() {
        if key.starts_with("ME_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

/// Overrides that shrink training to a couple of seconds.
fn tiny_train(cmd: &mut Command) {
    cmd.env("ME_TRAIN__N_SPEAKERS", "8")
        .env("ME_TRAIN__EPOCHS", "2")
        .env("ME_TRAIN__BATCHES_PER_EPOCH", "2")
        .env("ME_TRAIN__BATCH_MIXTURES", "4")
        .env("ME_TRAIN__SPAN_FRAMES", "60")
        .env("ME_MODEL__CHANNELS", "16")
        .env("ME_MODEL__NUM_BLOCKS", "1")
        .env("ME_MODEL__EMBEDDING_DIM", "16")
        .env("ME_MODEL__ATTENTION_CHANNELS", "8");
}

/// Overrides that shrink the evaluation trial set.
fn tiny_trials(cmd: &mut Command) {
    cmd.env("ME_DATA__TRIALS__N_TRIALS", "12")
        .env("ME_DATA__TRIALS__N_SPEAKERS", "6");
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The single run directory created under `out`.
fn only_run_dir(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out)
        .expect("out dir exists")
        .map(|e| e.expect("entry").path())
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run dir in {out:?}");
    dirs.pop().expect("one entry")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = run(bin().arg("--definitely-not-a-flag"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr was: {stderr}");
}

#[test]
fn selfcheck_writes_layout_and_manifest() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = run(bin()
        .args(["selfcheck", "--cases", "3", "--seed", "11"])
        .arg("--out")
        .arg(tmp.path()));
    assert_success(&out);
    let dir = only_run_dir(tmp.path());
    assert!(dir
        .file_name()
        .expect("name")
        .to_string_lossy()
        .ends_with("-selfcheck"));

    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("manifest.json"))).expect("manifest parses");
    assert_eq!(manifest["status"], "success");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["command"], "selfcheck");
    assert_eq!(manifest["config_file"], "config.toml");
    assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));
    assert!(manifest["wall_time_s"].as_f64().is_some_and(|t| t >= 0.0));

    let echoed = String::from_utf8(read(&dir.join("config.toml"))).expect("utf8");
    let parsed = maskedembed::config::parse_run_config(&echoed).expect("echo parses");
    assert_eq!(parsed, maskedembed::config::RunConfig::default());

    let checks: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("results").join("checks.json"))).expect("json");
    let names: Vec<&str> = checks
        .as_array()
        .expect("array")
        .iter()
        .map(|c| c["property"].as_str().expect("name"))
        .collect();
    assert!(names.contains(&"se-gate-reduction"));
    assert!(names.contains(&"attentive-pool-masked-independence"));
}

#[test]
fn failed_run_is_recorded_and_exits_1() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = run(bin()
        .args(["selfcheck", "--cases", "3"])
        .arg("--out")
        .arg(tmp.path())
        // An invalid setting caught by validation, after parsing succeeds.
        .env("ME_EVAL__N_RESAMPLES", "0"));
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("n_resamples"), "stderr was: {stderr}");
}

#[test]
fn env_override_lands_in_echoed_config() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = run(bin()
        .args(["gradcheck", "--cases", "1"])
        .arg("--out")
        .arg(tmp.path())
        .env("ME_TRAIN__EPOCHS", "3"));
    assert_success(&out);
    let dir = only_run_dir(tmp.path());
    let echoed = String::from_utf8(read(&dir.join("config.toml"))).expect("utf8");
    let parsed = maskedembed::config::parse_run_config(&echoed).expect("echo parses");
    assert_eq!(parsed.train.epochs, 3);
}

#[test]
fn train_same_seed_twice_is_byte_identical() {
    let tmp_a = tempfile::tempdir().expect("tempdir");
    let tmp_b = tempfile::tempdir().expect("tempdir");
    for tmp in [&tmp_a, &tmp_b] {
        let mut cmd = bin();
        tiny_train(&mut cmd);
        // One-epoch cycles so per-cycle checkpoints are exercised too.
        cmd.env("ME_TRAIN__LR__CYCLE_EPOCHS", "1");
        let out = run(cmd.args(["train", "--seed", "7"]).arg("--out").arg(tmp.path()));
        assert_success(&out);
    }
    let dir_a = only_run_dir(tmp_a.path());
    let dir_b = only_run_dir(tmp_b.path());
    let names_a = checkpoint_names(&dir_a);
    assert_eq!(names_a, checkpoint_names(&dir_b), "checkpoint sets differ");
    assert!(names_a.contains(&"final.json".to_string()));
    assert!(names_a.contains(&"cycle001.json".to_string()));
    let mut files: Vec<PathBuf> = names_a
        .iter()
        .map(|n| Path::new("checkpoints").join(n))
        .collect();
    files.push(PathBuf::from("metrics.log"));
    for rel in files {
        let a = read(&dir_a.join(&rel));
        let b = read(&dir_b.join(&rel));
        assert!(a == b, "{} differs between identically-seeded runs", rel.display());
        assert!(!a.is_empty(), "{} is empty", rel.display());
    }
}

/// Sorted file names in a run's `checkpoints/` directory.
fn checkpoint_names(run_dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(run_dir.join("checkpoints"))
        .expect("checkpoints dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn sweep_csv_has_one_row_per_m() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let ckpt = train_tiny_model(tmp.path());
    let mut cmd = bin();
    tiny_trials(&mut cmd);
    let out = run(cmd
        .args(["sweep-m", "--m", "0,1,2,3,5", "--seed", "3"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(tmp.path().join("sweep")));
    assert_success(&out);
    let dir = only_run_dir(&tmp.path().join("sweep"));
    let csv = String::from_utf8(read(&dir.join("results").join("sweep.csv"))).expect("utf8");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6, "header + 5 data rows, got: {csv}");
    assert_eq!(lines[0], "m,mean_cosine,eer");
    for (line, m) in lines[1..].iter().zip(["0", "1", "2", "3", "5"]) {
        assert!(line.starts_with(&format!("{m},")), "row {line} should start with {m}");
    }
}

#[test]
fn eval_verify_from_files_matches_in_memory() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let ckpt = train_tiny_model(tmp.path());

    let mut cmd = bin();
    tiny_trials(&mut cmd);
    let out = run(cmd
        .args(["synth", "--seed", "3"])
        .arg("--out")
        .arg(tmp.path().join("synth")));
    assert_success(&out);
    let synth_results = only_run_dir(&tmp.path().join("synth")).join("results");

    let mut cmd = bin();
    tiny_trials(&mut cmd);
    let out = run(cmd
        .args(["eval-verify", "--seed", "3"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--out")
        .arg(tmp.path().join("mem")));
    assert_success(&out);

    let mut cmd = bin();
    tiny_trials(&mut cmd);
    let out = run(cmd
        .args(["eval-verify", "--seed", "3"])
        .arg("--model")
        .arg(&ckpt)
        .arg("--trials")
        .arg(synth_results.join("trials.txt"))
        .arg("--manifest")
        .arg(synth_results.join("dataset.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("files")));
    assert_success(&out);

    let mem = read(&only_run_dir(&tmp.path().join("mem")).join("results").join("eer.csv"));
    let files = read(&only_run_dir(&tmp.path().join("files")).join("results").join("eer.csv"));
    assert!(!mem.is_empty());
    assert!(
        mem == files,
        "in-memory and exported-file evaluation disagree:\n{}\nvs\n{}",
        String::from_utf8_lossy(&mem),
        String::from_utf8_lossy(&files)
    );
}

#[test]
fn trials_flag_requires_manifest() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = run(bin()
        .args(["eval-verify", "--model", "nope.json", "--trials", "x.txt"])
        .arg("--out")
        .arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2), "usage error expected");
}

/// Trains a throwaway model under `base/train` and returns the checkpoint.
fn train_tiny_model(base: &Path) -> PathBuf {
    let mut cmd = bin();
    tiny_train(&mut cmd);
    let out = run(cmd
        .args(["train", "--seed", "7"])
        .arg("--out")
        .arg(base.join("train")));
    assert_success(&out);
    only_run_dir(&base.join("train"))
        .join("checkpoints")
        .join("final.json")
}
