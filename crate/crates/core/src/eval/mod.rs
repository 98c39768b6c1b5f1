//! Verification scoring (cosine similarity, EER, bootstrap significance),
//! the non-target-duration sweep, and a miniature sliding-window diarization
//! pipeline scored by DER.
//!
//! EER sweeps thresholds at score midpoints and interpolates linearly
//! between adjacent operating points, breaking ties toward the lower
//! threshold; `eer_by_exhaustive_sweep` is an O(n²) reference implementation
//! that must agree exactly. DER uses an optimal one-to-one speaker mapping,
//! no collar, with overlapped speech fully scored.

use crate::encoder::{extract_embedding, Embedding, EncoderError, Model};
use crate::features::rttm::RttmSegment;
use crate::features::{
    rasterize_speaker, ActivityAnnotation, ActivityMask, FeatureError, FeatureSequence, Interval,
};
use crate::rng::Prng;
use crate::synth::dataset::{Trial, TrialSet};
use crate::synth::{scale_nontarget_duration, Mixture, OverlapBucket, SynthError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

/// Errors from scoring, sweeping, clustering, or diarization scoring.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("zero vector has no direction for cosine scoring")]
    ZeroVector,
    #[error("need both same-speaker and different-speaker trials")]
    SingleClass,
    #[error("empty input: {what}")]
    Empty { what: String },
    #[error("mismatched trial sets: {what}")]
    Mismatched { what: String },
    #[error("reference annotation contains no speech")]
    EmptyReference,
    #[error("invalid argument: {what}")]
    Invalid { what: String },
    #[error("trial list line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Cosine scoring
// ---------------------------------------------------------------------------

fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid {
            what: format!("embedding dims {} vs {}", a.len(), b.len()),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Cosine similarity between two embeddings; errors on a zero vector.
pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64, EvalError> {
    cosine_slices(&a.vector, &b.vector)
}

// ---------------------------------------------------------------------------
// EER
// ---------------------------------------------------------------------------

/// One scored verification trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialScore {
    pub id: String,
    pub score: f64,
    pub same_speaker: bool,
    pub bucket: OverlapBucket,
}

/// Equal error rate and the threshold where FAR crosses FRR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Candidate thresholds: one below every score, the midpoints between
/// adjacent distinct scores, and one above every score.
fn candidate_thresholds(pairs: &[(f64, bool)]) -> Vec<f64> {
    let mut vals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut out = Vec::with_capacity(vals.len() + 1);
    out.push(vals[0] - 1.0);
    for w in vals.windows(2) {
        out.push((w[0] + w[1]) / 2.0);
    }
    out.push(vals[vals.len() - 1] + 1.0);
    out
}

fn class_counts(pairs: &[(f64, bool)]) -> Result<(usize, usize), EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty {
            what: "no trials to score".into(),
        });
    }
    let n_tar = pairs.iter().filter(|p| p.1).count();
    let n_non = pairs.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((n_tar, n_non))
}

/// Sorted-scan EER: FAR/FRR at every candidate threshold via cumulative
/// counts, then linear interpolation across the sign change of FAR − FRR.
fn eer_from_pairs(pairs: &[(f64, bool)]) -> Result<EerResult, EvalError> {
    let (n_tar, n_non) = class_counts(pairs)?;
    let thresholds = candidate_thresholds(pairs);
    let mut tar: Vec<f64> = pairs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let mut non: Vec<f64> = pairs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);

    let mut prev_th = thresholds[0];
    let mut prev_far = 1.0;
    let mut prev_frr = 0.0;
    for &th in &thresholds {
        let far = (n_non - non.partition_point(|&s| s < th)) as f64 / n_non as f64;
        let frr = tar.partition_point(|&s| s < th) as f64 / n_tar as f64;
        let d = far - frr;
        if d == 0.0 {
            return Ok(EerResult {
                eer: far,
                threshold: th,
            });
        }
        if d < 0.0 {
            let d0 = prev_far - prev_frr;
            let t = d0 / (d0 - d);
            return Ok(EerResult {
                eer: (1.0 - t) * prev_far + t * far,
                threshold: (1.0 - t) * prev_th + t * th,
            });
        }
        prev_th = th;
        prev_far = far;
        prev_frr = frr;
    }
    // Unreachable with the above-everything sentinel, but return the last
    // operating point rather than panicking.
    Ok(EerResult {
        eer: prev_far.max(prev_frr),
        threshold: prev_th,
    })
}

fn score_pairs(scores: &[TrialScore]) -> Vec<(f64, bool)> {
    scores.iter().map(|s| (s.score, s.same_speaker)).collect()
}

/// Equal error rate over scored trials; errors on single-class input.
pub fn compute_eer(scores: &[TrialScore]) -> Result<EerResult, EvalError> {
    eer_from_pairs(&score_pairs(scores))
}

/// O(n²) reference EER: recounts every trial at every candidate threshold
/// and finds the crossing with its own scan. `compute_eer` must agree
/// exactly on inputs of ≤ 200 trials.
pub fn eer_by_exhaustive_sweep(scores: &[TrialScore]) -> Result<EerResult, EvalError> {
    let pairs = score_pairs(scores);
    let (n_tar, n_non) = class_counts(&pairs)?;
    let thresholds = candidate_thresholds(&pairs);
    let mut prev_th = thresholds[0];
    let mut prev_far = 1.0;
    let mut prev_frr = 0.0;
    for &th in &thresholds {
        let mut accepts = 0usize;
        let mut rejects = 0usize;
        for &(s, same) in &pairs {
            if !same && s >= th {
                accepts += 1;
            }
            if same && s < th {
                rejects += 1;
            }
        }
        let far = accepts as f64 / n_non as f64;
        let frr = rejects as f64 / n_tar as f64;
        let d = far - frr;
        if d == 0.0 {
            return Ok(EerResult {
                eer: far,
                threshold: th,
            });
        }
        if d < 0.0 {
            let d0 = prev_far - prev_frr;
            let t = d0 / (d0 - d);
            return Ok(EerResult {
                eer: (1.0 - t) * prev_far + t * far,
                threshold: (1.0 - t) * prev_th + t * th,
            });
        }
        prev_th = th;
        prev_far = far;
        prev_frr = frr;
    }
    Ok(EerResult {
        eer: prev_far.max(prev_frr),
        threshold: prev_th,
    })
}

/// EER of one overlap bucket, labeled for CSV output.
#[derive(Debug, Clone, Serialize)]
pub struct BucketEer {
    pub bucket: String,
    pub eer: f64,
    pub threshold: f64,
}

/// Per-bucket EER in canonical bucket order; buckets absent from the input
/// are skipped, single-class buckets are an error.
pub fn eer_by_bucket(scores: &[TrialScore]) -> Result<Vec<BucketEer>, EvalError> {
    let mut out = Vec::new();
    for bucket in OverlapBucket::ALL {
        let subset: Vec<TrialScore> = scores
            .iter()
            .filter(|s| s.bucket == bucket)
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let r = compute_eer(&subset)?;
        out.push(BucketEer {
            bucket: bucket.label().to_string(),
            eer: r.eer,
            threshold: r.threshold,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bootstrap comparison
// ---------------------------------------------------------------------------

/// Paired-bootstrap comparison of two systems on the same trials.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BootstrapOutcome {
    /// Fraction of resamples where the EER difference flips sign.
    pub p_value: f64,
    /// Observed `eer_a − eer_b`.
    pub observed_diff: f64,
    pub eer_a: f64,
    pub eer_b: f64,
}

/// Paired bootstrap over trials with replacement. Identical observed EERs
/// report p = 1 by convention; a resample that degenerates to a single
/// class counts as no flip. Deterministic given the seed.
pub fn bootstrap_compare(
    a: &[TrialScore],
    b: &[TrialScore],
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapOutcome, EvalError> {
    if n_resamples == 0 {
        return Err(EvalError::Invalid {
            what: "n_resamples must be positive".into(),
        });
    }
    if a.len() != b.len() {
        return Err(EvalError::Mismatched {
            what: format!("{} vs {} trials", a.len(), b.len()),
        });
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.id != y.id {
            return Err(EvalError::Mismatched {
                what: format!("trial {i}: id {:?} vs {:?}", x.id, y.id),
            });
        }
        if x.same_speaker != y.same_speaker {
            return Err(EvalError::Mismatched {
                what: format!("trial {i} ({}): labels disagree", x.id),
            });
        }
    }
    let pa = score_pairs(a);
    let pb = score_pairs(b);
    let eer_a = eer_from_pairs(&pa)?.eer;
    let eer_b = eer_from_pairs(&pb)?.eer;
    let observed = eer_a - eer_b;
    if observed == 0.0 {
        return Ok(BootstrapOutcome {
            p_value: 1.0,
            observed_diff: 0.0,
            eer_a,
            eer_b,
        });
    }

    let mut rng = Prng::derive(seed, 0xB007);
    let n = pa.len();
    let mut flips = 0usize;
    let mut ra = vec![(0.0, false); n];
    let mut rb = vec![(0.0, false); n];
    for _ in 0..n_resamples {
        for slot in 0..n {
            let pick = rng.index(n);
            ra[slot] = pa[pick];
            rb[slot] = pb[pick];
        }
        if let (Ok(x), Ok(y)) = (eer_from_pairs(&ra), eer_from_pairs(&rb)) {
            let d = x.eer - y.eer;
            let flipped = if observed < 0.0 { d >= 0.0 } else { d <= 0.0 };
            if flipped {
                flips += 1;
            }
        }
    }
    Ok(BootstrapOutcome {
        p_value: flips as f64 / n_resamples as f64,
        observed_diff: observed,
        eer_a,
        eer_b,
    })
}

// ---------------------------------------------------------------------------
// Trial scoring and the non-target-duration sweep
// ---------------------------------------------------------------------------

/// Scores trials with `test` mixtures swapped for `tests`; the shared path
/// that makes the m=1 sweep bitwise-equal to direct evaluation.
fn score_with_tests(
    model: &Model,
    trials: &[Trial],
    tests: &[&Mixture],
) -> Result<Vec<TrialScore>, EvalError> {
    let guided = model.config.any_guide();
    trials
        .par_iter()
        .zip(tests.par_iter())
        .map(|(trial, test)| {
            let enroll_mask = if guided {
                Some(trial.enroll.masks()?)
            } else {
                None
            };
            let test_mask = if guided { Some(test.masks()?) } else { None };
            let e = extract_embedding(model, &trial.enroll.features, enroll_mask.as_ref())?;
            let t = extract_embedding(model, &test.features, test_mask.as_ref())?;
            Ok(TrialScore {
                id: trial.id.clone(),
                score: cosine_score(&e, &t)?,
                same_speaker: trial.same_speaker,
                bucket: trial.bucket,
            })
        })
        .collect()
}

/// Scores every trial: guided models extract with activity masks on both
/// sides, baselines without.
pub fn score_trials(model: &Model, trials: &TrialSet) -> Result<Vec<TrialScore>, EvalError> {
    let tests: Vec<&Mixture> = trials.trials.iter().map(|t| &t.test).collect();
    score_with_tests(model, &trials.trials, &tests)
}

/// One row of the non-target-duration sweep; `None` cells mean the sweep
/// is not applicable at that scale (some mixture has no non-target-only
/// frames to rescale).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepRow {
    pub m: f64,
    /// Mean cosine over same-speaker trials.
    pub mean_cosine: Option<f64>,
    pub eer: Option<f64>,
}

/// Rescales every test mixture's non-target-only duration by each `m`,
/// re-extracts, and re-scores. The m=1 row equals direct evaluation exactly.
pub fn sweep_nontarget_duration(
    model: &Model,
    trials: &TrialSet,
    m_values: &[f64],
) -> Result<Vec<SweepRow>, EvalError> {
    if trials.trials.is_empty() {
        return Err(EvalError::Empty {
            what: "no trials to sweep".into(),
        });
    }
    let mut rows = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let mut scaled: Vec<Mixture> = Vec::with_capacity(trials.trials.len());
        let mut applicable = true;
        for trial in &trials.trials {
            match scale_nontarget_duration(&trial.test, m) {
                Ok(s) => scaled.push(s),
                Err(SynthError::NoNontargetOnlyFrames) => {
                    applicable = false;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !applicable {
            rows.push(SweepRow {
                m,
                mean_cosine: None,
                eer: None,
            });
            continue;
        }
        let tests: Vec<&Mixture> = scaled.iter().collect();
        let scores = score_with_tests(model, &trials.trials, &tests)?;
        let eer = eer_from_pairs(&score_pairs(&scores))?.eer;
        let same: Vec<f64> = scores
            .iter()
            .filter(|s| s.same_speaker)
            .map(|s| s.score)
            .collect();
        rows.push(SweepRow {
            m,
            mean_cosine: Some(same.iter().sum::<f64>() / same.len() as f64),
            eer: Some(eer),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Diarization
// ---------------------------------------------------------------------------

/// Synthetic conversations to generate and score when evaluating diarization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConversationConfig {
    /// Number of conversations.
    pub count: usize,
    /// Speakers per conversation.
    pub speakers: usize,
    /// Speaking turns per conversation.
    pub turns: usize,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self {
            count: 10,
            speakers: 3,
            turns: 12,
        }
    }
}

/// Sliding-window diarization settings. The clustering threshold is
/// calibrated data, carried in configuration rather than defaulted here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiarConfig {
    #[serde(default = "default_window_s")]
    pub window_s: f64,
    #[serde(default = "default_shift_s")]
    pub shift_s: f64,
    /// Average-linkage stopping threshold on cosine distance.
    pub ahc_threshold: f64,
}

fn default_window_s() -> f64 {
    10.0
}

fn default_shift_s() -> f64 {
    1.0
}

/// Per-cluster speech intervals; the vector index is the cluster label.
#[derive(Debug, Clone)]
pub struct DiarHypothesis {
    pub clusters: Vec<Vec<Interval>>,
}

/// Average-linkage agglomerative clustering on cosine distance: merge the
/// closest pair while its average distance stays within the threshold.
/// Returns one label per entry, contiguous and ordered by first appearance.
fn average_linkage_labels(embeddings: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>, EvalError> {
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine_slices(&embeddings[i], &embeddings[j])?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += dist[i * n + j];
                    }
                }
                let avg = sum / (clusters[a].len() * clusters[b].len()) as f64;
                if best.map_or(true, |(bd, _, _)| avg < bd) {
                    best = Some((avg, a, b));
                }
            }
        }
        let (avg, a, b) = best.expect("at least one pair");
        if avg > threshold {
            break;
        }
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
    }
    clusters.sort_by_key(|c| c.iter().copied().min().expect("nonempty cluster"));
    let mut labels = vec![0usize; n];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            labels[i] = c;
        }
    }
    Ok(labels)
}

struct WindowEntry {
    speaker: usize,
    first_frame: usize,
    last_frame: usize,
    embedding: Vec<f64>,
}

/// Runs sliding-window diarization against an oracle segmentation: one
/// embedding per window and locally active speaker (guided models use full
/// activity masks, baselines only frames where the speaker is alone),
/// average-linkage clustering, then per-frame majority-vote stitching.
/// Windows without speech are skipped.
pub fn run_diarization(
    model: &Model,
    features: &FeatureSequence,
    oracle: &ActivityAnnotation,
    cfg: &DiarConfig,
) -> Result<DiarHypothesis, EvalError> {
    let shift_s = features.frame_shift_s;
    if !(cfg.window_s > 0.0 && cfg.shift_s > 0.0) || !cfg.ahc_threshold.is_finite() {
        return Err(EvalError::Invalid {
            what: format!(
                "window {}, shift {}, threshold {}",
                cfg.window_s, cfg.shift_s, cfg.ahc_threshold
            ),
        });
    }
    let t_n = features.num_frames();
    let win = ((cfg.window_s / shift_s).round() as usize).max(1);
    let hop = ((cfg.shift_s / shift_s).round() as usize).max(1);
    let speaker_ids = oracle.speaker_ids();
    let rasters: Vec<Vec<bool>> = speaker_ids
        .iter()
        .map(|s| rasterize_speaker(oracle, s, t_n, shift_s))
        .collect::<Result<_, _>>()?;
    let guided = model.config.any_guide();

    let starts: Vec<usize> = (0..t_n).step_by(hop).collect();
    let per_window: Vec<Vec<WindowEntry>> = starts
        .par_iter()
        .map(|&f0| -> Result<Vec<WindowEntry>, EvalError> {
            let f1 = (f0 + win).min(t_n);
            let mut entries = Vec::new();
            for (si, raster) in rasters.iter().enumerate() {
                let active: Vec<usize> = (f0..f1).filter(|&f| raster[f]).collect();
                if active.is_empty() {
                    continue;
                }
                let embedding = if guided {
                    let frames: Vec<usize> = (f0..f1).collect();
                    let window = features.gather_frames(&frames)?;
                    let mask = ActivityMask {
                        q_target: (f0..f1).map(|f| raster[f]).collect(),
                        q_nontarget: (f0..f1)
                            .map(|f| {
                                rasters
                                    .iter()
                                    .enumerate()
                                    .any(|(sj, r)| sj != si && r[f])
                            })
                            .collect(),
                    };
                    extract_embedding(model, &window, Some(&mask))?
                } else {
                    let solo: Vec<usize> = active
                        .iter()
                        .copied()
                        .filter(|&f| {
                            rasters
                                .iter()
                                .enumerate()
                                .all(|(sj, r)| sj == si || !r[f])
                        })
                        .collect();
                    if solo.is_empty() {
                        continue;
                    }
                    let window = features.gather_frames(&solo)?;
                    extract_embedding(model, &window, None)?
                };
                entries.push(WindowEntry {
                    speaker: si,
                    first_frame: f0,
                    last_frame: f1,
                    embedding: embedding.vector,
                });
            }
            Ok(entries)
        })
        .collect::<Result<_, _>>()?;
    let entries: Vec<WindowEntry> = per_window.into_iter().flatten().collect();
    if entries.is_empty() {
        return Ok(DiarHypothesis { clusters: vec![] });
    }

    let embeddings: Vec<Vec<f64>> = entries.iter().map(|e| e.embedding.clone()).collect();
    let labels = average_linkage_labels(&embeddings, cfg.ahc_threshold)?;
    let n_clusters = labels.iter().copied().max().unwrap_or(0) + 1;

    // Stitch: each active frame of each oracle speaker goes to the cluster
    // that most of its covering windows voted for (ties to the lower label).
    let mut timelines = vec![vec![false; t_n]; n_clusters];
    for (si, raster) in rasters.iter().enumerate() {
        let mine: Vec<(usize, usize, usize)> = entries
            .iter()
            .zip(&labels)
            .filter(|(e, _)| e.speaker == si)
            .map(|(e, &label)| (e.first_frame, e.last_frame, label))
            .collect();
        let mut votes = vec![0u32; n_clusters];
        for (f, _) in raster.iter().enumerate().filter(|(_, &a)| a) {
            votes.iter_mut().for_each(|v| *v = 0);
            for &(f0, f1, label) in &mine {
                if f >= f0 && f < f1 {
                    votes[label] += 1;
                }
            }
            if let Some((winner, _)) = votes
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .max_by(|(la, va), (lb, vb)| va.cmp(vb).then(lb.cmp(la)))
            {
                timelines[winner][f] = true;
            }
        }
    }

    let mut clusters: Vec<Vec<Interval>> = Vec::new();
    for timeline in &timelines {
        let runs = frame_runs(timeline);
        if runs.is_empty() {
            continue;
        }
        let intervals = runs
            .into_iter()
            .map(|(a, b)| Interval::new(a as f64 * shift_s, b as f64 * shift_s))
            .collect::<Result<Vec<_>, _>>()?;
        clusters.push(intervals);
    }
    Ok(DiarHypothesis { clusters })
}

/// Maximal runs of `true` as half-open frame ranges.
fn frame_runs(timeline: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (f, &on) in timeline.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(f),
            (false, Some(s)) => {
                runs.push((s, f));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, timeline.len()));
    }
    runs
}

/// Hypothesis clusters as RTTM segments, labeled `spk00`, `spk01`, …
pub fn hypothesis_to_rttm(hyp: &DiarHypothesis, recording: &str) -> Vec<RttmSegment> {
    let mut out = Vec::new();
    for (c, intervals) in hyp.clusters.iter().enumerate() {
        for iv in intervals {
            out.push(RttmSegment {
                recording: recording.to_string(),
                onset_s: iv.onset_s,
                duration_s: iv.length(),
                speaker: format!("spk{c:02}"),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// DER
// ---------------------------------------------------------------------------

/// Diarization error decomposition over the reference speech time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DerBreakdown {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    /// Total reference speech time (overlap counted per speaker).
    pub ref_speech: f64,
}

/// Sorts and coalesces intervals into a disjoint track.
fn merged_track(intervals: &[Interval]) -> Vec<Interval> {
    let mut sorted: Vec<Interval> = intervals.to_vec();
    sorted.sort_by(|a, b| f64::total_cmp(&a.onset_s, &b.onset_s));
    let mut out: Vec<Interval> = Vec::new();
    for iv in sorted {
        match out.last_mut() {
            Some(last) if iv.onset_s <= last.offset_s => {
                last.offset_s = last.offset_s.max(iv.offset_s);
            }
            _ => out.push(iv),
        }
    }
    out
}

fn track_active(track: &[Interval], t: f64) -> bool {
    track.iter().any(|iv| iv.contains(t))
}

/// Max-weight one-to-one assignment between rows and columns of `weight`,
/// exact via subset dynamic programming over the smaller side.
fn optimal_assignment(weight: &[Vec<f64>]) -> Result<Vec<Option<usize>>, EvalError> {
    let rows = weight.len();
    let cols = weight.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Ok(vec![None; rows]);
    }
    if rows.min(cols) > 20 {
        return Err(EvalError::Invalid {
            what: format!("assignment over {rows}x{cols} streams is too large"),
        });
    }
    // Orient so the bitmask covers the smaller dimension.
    let flip = cols > rows;
    let (n_items, n_mask) = if flip { (cols, rows) } else { (rows, cols) };
    let w = |item: usize, m: usize| {
        if flip {
            weight[m][item]
        } else {
            weight[item][m]
        }
    };
    let full = 1usize << n_mask;
    let mut dp = vec![vec![f64::NEG_INFINITY; full]; n_items + 1];
    dp[0][0] = 0.0;
    for i in 0..n_items {
        for mask in 0..full {
            let cur = dp[i][mask];
            if cur == f64::NEG_INFINITY {
                continue;
            }
            if dp[i + 1][mask] < cur {
                dp[i + 1][mask] = cur;
            }
            for k in 0..n_mask {
                if mask & (1 << k) == 0 {
                    let v = cur + w(i, k);
                    if dp[i + 1][mask | (1 << k)] < v {
                        dp[i + 1][mask | (1 << k)] = v;
                    }
                }
            }
        }
    }
    let mut mask = (0..full)
        .max_by(|&a, &b| f64::total_cmp(&dp[n_items][a], &dp[n_items][b]))
        .expect("nonempty dp");
    // Backtrack deterministically: prefer leaving an item unmatched, then
    // the lowest matched index.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in (0..n_items).rev() {
        if dp[i + 1][mask] == dp[i][mask] {
            continue;
        }
        let k = (0..n_mask)
            .find(|&k| {
                mask & (1 << k) != 0 && dp[i + 1][mask] == dp[i][mask ^ (1 << k)] + w(i, k)
            })
            .expect("dp backtrack");
        pairs.push((i, k));
        mask ^= 1 << k;
    }
    let mut assigned = vec![None; rows];
    for (item, m) in pairs {
        let (row, col) = if flip { (m, item) } else { (item, m) };
        assigned[row] = Some(col);
    }
    Ok(assigned)
}

fn overlap_between(a: &[Interval], b: &[Interval]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            let lo = x.onset_s.max(y.onset_s);
            let hi = x.offset_s.min(y.offset_s);
            if hi > lo {
                total += hi - lo;
            }
        }
    }
    total
}

/// Diarization error rate with an optimal one-to-one speaker mapping by
/// maximal overlap, no collar, and overlapped speech fully scored.
pub fn compute_der(
    reference: &ActivityAnnotation,
    hypothesis: &DiarHypothesis,
) -> Result<DerBreakdown, EvalError> {
    let ref_tracks: Vec<Vec<Interval>> = reference
        .speakers
        .iter()
        .map(|s| merged_track(&s.intervals))
        .collect();
    let ref_speech: f64 = ref_tracks
        .iter()
        .flat_map(|t| t.iter().map(Interval::length))
        .sum();
    if ref_speech <= 0.0 {
        return Err(EvalError::EmptyReference);
    }
    let hyp_tracks: Vec<Vec<Interval>> = hypothesis
        .clusters
        .iter()
        .map(|c| merged_track(c))
        .collect();

    let weight: Vec<Vec<f64>> = ref_tracks
        .iter()
        .map(|r| hyp_tracks.iter().map(|h| overlap_between(r, h)).collect())
        .collect();
    let assigned = optimal_assignment(&weight)?;

    let mut cuts: Vec<f64> = ref_tracks
        .iter()
        .chain(hyp_tracks.iter())
        .flat_map(|t| t.iter().flat_map(|iv| [iv.onset_s, iv.offset_s]))
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut miss = 0.0;
    let mut false_alarm = 0.0;
    let mut confusion = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let dur = b - a;
        if dur <= 0.0 {
            continue;
        }
        let mid = a + dur / 2.0;
        let n_ref = ref_tracks.iter().filter(|t| track_active(t, mid)).count();
        let n_hyp = hyp_tracks.iter().filter(|t| track_active(t, mid)).count();
        let n_correct = ref_tracks
            .iter()
            .enumerate()
            .filter(|(s, t)| {
                track_active(t, mid)
                    && assigned[*s].is_some_and(|c| track_active(&hyp_tracks[c], mid))
            })
            .count();
        miss += n_ref.saturating_sub(n_hyp) as f64 * dur;
        false_alarm += n_hyp.saturating_sub(n_ref) as f64 * dur;
        confusion += (n_ref.min(n_hyp) - n_correct) as f64 * dur;
    }
    Ok(DerBreakdown {
        der: (miss + false_alarm + confusion) / ref_speech,
        miss,
        false_alarm,
        confusion,
        ref_speech,
    })
}

/// Multi-line human-readable DER breakdown.
pub fn format_der_summary(der: &DerBreakdown) -> String {
    format!(
        "reference speech: {:.6} s\nmissed speech:    {:.6} s\nfalse alarm:      {:.6} s\nspeaker confusion:{:.6} s\nDER:              {:.6}\n",
        der.ref_speech, der.miss, der.false_alarm, der.confusion, der.der
    )
}

// ---------------------------------------------------------------------------
// Trial lists and CSV output
// ---------------------------------------------------------------------------

/// One verification trial as stored on disk:
/// `<label 0|1> <enroll-path> <test-manifest-id>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialListLine {
    pub same_speaker: bool,
    pub enroll_path: String,
    pub test_id: String,
}

/// Writes trial lines in `<label> <enroll-path> <test-id>` format.
pub fn write_trial_list(
    mut writer: impl Write,
    lines: &[TrialListLine],
) -> Result<(), EvalError> {
    for line in lines {
        writeln!(
            writer,
            "{} {} {}",
            u8::from(line.same_speaker),
            line.enroll_path,
            line.test_id
        )?;
    }
    Ok(())
}

/// Parses a trial list; blank lines are skipped.
pub fn parse_trial_list(reader: impl BufRead) -> Result<Vec<TrialListLine>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(EvalError::Parse {
                line: idx + 1,
                what: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let same_speaker = match fields[0] {
            "0" => false,
            "1" => true,
            other => {
                return Err(EvalError::Parse {
                    line: idx + 1,
                    what: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        out.push(TrialListLine {
            same_speaker,
            enroll_path: fields[1].to_string(),
            test_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

/// CSV with columns `bucket,eer,threshold`.
pub fn write_eer_csv(mut writer: impl Write, rows: &[BucketEer]) -> Result<(), EvalError> {
    writeln!(writer, "bucket,eer,threshold")?;
    for row in rows {
        writeln!(writer, "{},{},{}", row.bucket, row.eer, row.threshold)?;
    }
    Ok(())
}

/// CSV with columns `m,mean_cosine,eer`; inapplicable cells print `NA`.
pub fn write_sweep_csv(mut writer: impl Write, rows: &[SweepRow]) -> Result<(), EvalError> {
    writeln!(writer, "m,mean_cosine,eer")?;
    for row in rows {
        let mc = row
            .mean_cosine
            .map_or_else(|| "NA".to_string(), |v| v.to_string());
        let eer = row.eer.map_or_else(|| "NA".to_string(), |v| v.to_string());
        writeln!(writer, "{},{},{}", row.m, mc, eer)?;
    }
    Ok(())
}
