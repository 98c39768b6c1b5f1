//! Synthetic speakers, overlapped mixtures, and non-target duration scaling.
//!
//! Speakers are procedural log-mel sources: a per-bin spectral envelope (the
//! speaker identity), a pitch-band bump, and seeded temporal modulation.
//! Mixtures sum speaker energies in the linear domain and log the result, so
//! overlapped regions mix the way additive signals do. Every interval
//! endpoint is a whole multiple of the frame shift, which makes annotations
//! exact under rasterization and keeps overlap bookkeeping free of edge
//! effects.

pub mod dataset;
pub mod manifest;

use crate::features::{
    rasterize_activities, rasterize_speaker, ActivityAnnotation, ActivityMask, FeatureError,
    FeatureSequence, Interval, SpeakerActivity,
};
use crate::rng::Prng;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from synthetic data generation.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not separate speaker envelopes after {attempts} attempts")]
    Separation { attempts: usize },
    #[error("no placement hit overlap bucket {bucket} after {attempts} attempts")]
    InfeasibleBucket {
        bucket: OverlapBucket,
        attempts: usize,
    },
    #[error("duration scale must be a non-negative number, got {m}")]
    InvalidScale { m: f64 },
    #[error("mixture has no frames where only non-target speakers are active")]
    NoNontargetOnlyFrames,
    #[error("insufficient speakers: need {needed}, got {got}")]
    InsufficientSpeakers { needed: usize, got: usize },
    #[error("invalid synthesis request: {what}")]
    Invalid { what: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Knobs for the procedural feature synthesizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Feature bins per frame.
    pub n_mels: usize,
    /// Frame hop in seconds.
    pub frame_shift_s: f64,
    /// Analysis window length in seconds (metadata only here).
    pub frame_length_s: f64,
    /// Minimum pairwise L2 distance between speaker envelopes.
    pub min_envelope_distance: f64,
    /// Minimum onset separation between clips in a mixture, seconds.
    pub shift_min_s: f64,
    /// Retry budget for separation and bucket placement.
    pub max_retries: usize,
    /// Linear energy of the ambient noise floor (speech is O(1)).
    pub ambient_energy: f64,
    /// Log-domain std of per-cell spectral jitter.
    pub spectral_noise_std: f64,
    /// Per-clip loudness range: each clip's energy is scaled by a factor
    /// drawn uniformly in ±this many dB, so interferers can be louder or
    /// quieter than the target the way real recordings are.
    pub clip_gain_db: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            frame_shift_s: 0.010,
            frame_length_s: 0.025,
            min_envelope_distance: 4.0,
            shift_min_s: 0.5,
            max_retries: 200,
            ambient_energy: 1e-4,
            spectral_noise_std: 0.3,
            clip_gain_db: 6.0,
        }
    }
}

/// A procedural speaker: identity lives in the spectral envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// Per-bin log-energy offsets; the speaker's identity.
    pub envelope: Vec<f64>,
    /// Center bin of an extra energy bump.
    pub pitch_center: f64,
    pub pitch_width: f64,
    pub pitch_height: f64,
    /// Amplitude modulation rate in Hz.
    pub modulation_rate_hz: f64,
    /// Amplitude modulation depth in (0, 1).
    pub modulation_depth: f64,
    /// Stream seed for this speaker's stochastic texture.
    pub modulation_seed: u64,
}

impl SyntheticSpeaker {
    /// L2 distance between two speakers' envelopes.
    pub fn envelope_distance(&self, other: &SyntheticSpeaker) -> f64 {
        self.envelope
            .iter()
            .zip(&other.envelope)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Per-bin linear gain: envelope plus the pitch-band bump.
    fn bin_gains(&self, n_mels: usize) -> Vec<f64> {
        (0..n_mels)
            .map(|i| {
                let d = (i as f64 - self.pitch_center) / self.pitch_width;
                let bump = self.pitch_height * (-0.5 * d * d).exp();
                (self.envelope[i % self.envelope.len()] + bump).exp()
            })
            .collect()
    }
}

/// Draws `n_speakers` speakers with pairwise-separated envelopes.
pub fn synth_speaker_bank(
    seed: u64,
    n_speakers: usize,
    cfg: &SynthConfig,
) -> Result<Vec<SyntheticSpeaker>, SynthError> {
    if n_speakers < 2 {
        return Err(SynthError::Invalid {
            what: format!("speaker bank needs at least 2 speakers, got {n_speakers}"),
        });
    }
    let mut rng = Prng::derive(seed, 0xBA17);
    let mut bank: Vec<SyntheticSpeaker> = Vec::with_capacity(n_speakers);
    for k in 0..n_speakers {
        let mut envelope = None;
        for _ in 0..cfg.max_retries.max(1) {
            let cand = rng.gaussian_vec(cfg.n_mels, 1.0);
            let ok = bank.iter().all(|s| {
                let d = cand
                    .iter()
                    .zip(&s.envelope)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                d >= cfg.min_envelope_distance
            });
            if ok {
                envelope = Some(cand);
                break;
            }
        }
        let envelope = envelope.ok_or(SynthError::Separation {
            attempts: cfg.max_retries.max(1),
        })?;
        bank.push(SyntheticSpeaker {
            id: format!("spk{k:03}"),
            envelope,
            pitch_center: rng.range_f64(3.0, cfg.n_mels as f64 - 3.0),
            pitch_width: rng.range_f64(1.0, 3.0),
            pitch_height: rng.range_f64(0.5, 1.5),
            modulation_rate_hz: rng.range_f64(2.0, 8.0),
            modulation_depth: rng.range_f64(0.2, 0.5),
            modulation_seed: rng.next_u64(),
        });
    }
    Ok(bank)
}

/// Overlap-ratio bucket for a mixture's target speaker, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OverlapBucket {
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "(0,25)")]
    UpTo25,
    #[serde(rename = "[25,50)")]
    From25,
    #[serde(rename = "[50,75)")]
    From50,
    #[serde(rename = "[75,100)")]
    From75,
    #[serde(rename = "100")]
    Full,
}

impl OverlapBucket {
    pub const ALL: [OverlapBucket; 6] = [
        OverlapBucket::Zero,
        OverlapBucket::UpTo25,
        OverlapBucket::From25,
        OverlapBucket::From50,
        OverlapBucket::From75,
        OverlapBucket::Full,
    ];

    /// Whether a continuous overlap ratio falls in this bucket.
    pub fn contains(self, ratio: f64) -> bool {
        match self {
            OverlapBucket::Zero => ratio == 0.0,
            OverlapBucket::UpTo25 => ratio > 0.0 && ratio < 0.25,
            OverlapBucket::From25 => (0.25..0.50).contains(&ratio),
            OverlapBucket::From50 => (0.50..0.75).contains(&ratio),
            OverlapBucket::From75 => (0.75..1.0).contains(&ratio),
            OverlapBucket::Full => ratio == 1.0,
        }
    }

    /// Bucket a ratio falls into (boundaries go to the closed side).
    pub fn of_ratio(ratio: f64) -> OverlapBucket {
        if ratio <= 0.0 {
            OverlapBucket::Zero
        } else if ratio >= 1.0 {
            OverlapBucket::Full
        } else if ratio < 0.25 {
            OverlapBucket::UpTo25
        } else if ratio < 0.50 {
            OverlapBucket::From25
        } else if ratio < 0.75 {
            OverlapBucket::From50
        } else {
            OverlapBucket::From75
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OverlapBucket::Zero => "0",
            OverlapBucket::UpTo25 => "(0,25)",
            OverlapBucket::From25 => "[25,50)",
            OverlapBucket::From50 => "[50,75)",
            OverlapBucket::From75 => "[75,100)",
            OverlapBucket::Full => "100",
        }
    }

    /// Integer-exact membership for `overlap_frames / target_frames`,
    /// strictly interior for the partial buckets so the continuous ratio
    /// can never land on a boundary within floating-point error.
    fn contains_frames_strict(self, ov: usize, tg: usize) -> bool {
        match self {
            OverlapBucket::Zero => ov == 0,
            OverlapBucket::UpTo25 => ov > 0 && ov * 4 < tg,
            OverlapBucket::From25 => ov * 4 > tg && ov * 2 < tg,
            OverlapBucket::From50 => ov * 2 > tg && ov * 4 < tg * 3,
            OverlapBucket::From75 => ov * 4 > tg * 3 && ov < tg,
            OverlapBucket::Full => ov == tg && tg > 0,
        }
    }
}

impl std::fmt::Display for OverlapBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A synthesized recording with its speech annotation and designated target.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub features: FeatureSequence,
    pub annotation: ActivityAnnotation,
    pub target_id: String,
    /// Fraction of target speech time overlapped by other speakers.
    pub overlap_ratio: f64,
}

impl Mixture {
    /// Frame-level target / non-target masks for the designated target.
    pub fn masks(&self) -> Result<ActivityMask, FeatureError> {
        self.masks_for(&self.target_id)
    }

    /// Frame-level masks treating `speaker` as the target.
    pub fn masks_for(&self, speaker: &str) -> Result<ActivityMask, FeatureError> {
        rasterize_activities(
            &self.annotation,
            speaker,
            self.features.num_frames(),
            self.features.frame_shift_s,
        )
    }
}

/// One clip to render: which speaker, where, and for how long (frames).
#[derive(Debug, Clone, Copy)]
struct Event {
    speaker: usize,
    onset: usize,
    dur: usize,
}

/// Renders events into log-energy features plus the exact annotation.
fn synth_from_events(
    speakers: &[&SyntheticSpeaker],
    events: &[Event],
    t_total: usize,
    cfg: &SynthConfig,
    rng: &mut Prng,
) -> Result<(FeatureSequence, ActivityAnnotation), SynthError> {
    let f_n = cfg.n_mels;
    let shift = cfg.frame_shift_s;
    let mut energy = vec![0.0f64; f_n * t_total];

    let mut ambient_rng = Prng::seed(rng.next_u64());
    for cell in energy.iter_mut() {
        *cell = cfg.ambient_energy * (cfg.spectral_noise_std * ambient_rng.gaussian()).exp();
    }

    for ev in events {
        let sp = speakers[ev.speaker];
        let gains = sp.bin_gains(f_n);
        let mut utt_rng = Prng::seed(rng.next_u64() ^ sp.modulation_seed);
        let phase = utt_rng.range_f64(0.0, std::f64::consts::TAU);
        for t in ev.onset..ev.onset + ev.dur {
            let t_s = (t as f64 + 0.5) * shift;
            let m = 1.0
                + sp.modulation_depth
                    * (std::f64::consts::TAU * sp.modulation_rate_hz * t_s + phase).sin();
            for (i, g) in gains.iter().enumerate() {
                let jitter = (cfg.spectral_noise_std * utt_rng.gaussian()).exp();
                energy[i * t_total + t] += g * m * jitter;
            }
        }
    }

    let data: Vec<f64> = energy.iter().map(|e| e.ln()).collect();
    let features = FeatureSequence {
        frames: Tensor::from_vec(vec![f_n, t_total], data)?,
        frame_shift_s: shift,
        frame_length_s: cfg.frame_length_s,
    };

    let mut speakers_out = Vec::new();
    for (k, sp) in speakers.iter().enumerate() {
        let mut intervals: Vec<Interval> = events
            .iter()
            .filter(|ev| ev.speaker == k)
            .map(|ev| {
                Interval::new(ev.onset as f64 * shift, (ev.onset + ev.dur) as f64 * shift)
            })
            .collect::<Result<_, _>>()?;
        if intervals.is_empty() {
            continue;
        }
        intervals = crate::features::merge_intervals(&intervals);
        speakers_out.push(SpeakerActivity {
            speaker: sp.id.clone(),
            intervals,
        });
    }
    let annotation = ActivityAnnotation::new(speakers_out)?;
    Ok((features, annotation))
}

/// Converts seconds to a whole frame count, at least one frame.
fn to_frames(seconds: f64, shift: f64) -> usize {
    ((seconds / shift).round() as usize).max(1)
}

fn validate_mixture_speakers(
    speakers: &[&SyntheticSpeaker],
    durations_s: &[f64],
    max: usize,
) -> Result<(), SynthError> {
    if speakers.is_empty() || speakers.len() > max {
        return Err(SynthError::Invalid {
            what: format!("expected 1..={} speakers, got {}", max, speakers.len()),
        });
    }
    if durations_s.len() != speakers.len() {
        return Err(SynthError::Invalid {
            what: format!(
                "{} durations for {} speakers",
                durations_s.len(),
                speakers.len()
            ),
        });
    }
    if let Some(d) = durations_s.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
        return Err(SynthError::Invalid {
            what: format!("non-positive clip duration {d}"),
        });
    }
    for i in 0..speakers.len() {
        for j in i + 1..speakers.len() {
            if speakers[i].id == speakers[j].id {
                return Err(SynthError::Invalid {
                    what: format!("duplicate speaker {} in mixture", speakers[i].id),
                });
            }
        }
    }
    Ok(())
}

/// Strictly-interior overlap frame range for a partial bucket; `None` for
/// the point buckets 0 and 100.
fn bucket_overlap_range(bucket: OverlapBucket, tg: usize) -> Option<(usize, usize)> {
    let (lo, hi) = match bucket {
        OverlapBucket::Zero | OverlapBucket::Full => return None,
        OverlapBucket::UpTo25 => (1, (tg - 1) / 4),
        OverlapBucket::From25 => (tg / 4 + 1, (tg - 1) / 2),
        OverlapBucket::From50 => (tg / 2 + 1, (3 * tg - 1) / 4),
        OverlapBucket::From75 => ((3 * tg) / 4 + 1, tg - 1),
    };
    (lo <= hi).then_some((lo, hi))
}

/// One placement proposal: onset frames per speaker, possibly negative
/// before normalization. Speaker 0 is the target at onset 0.
fn propose_onsets(
    durs: &[usize],
    bucket: OverlapBucket,
    shift_frames: usize,
    rng: &mut Prng,
) -> Option<Vec<i64>> {
    let nt = durs[0];
    let sh = shift_frames as i64;
    match bucket {
        OverlapBucket::Zero => {
            // Chain clips left to right with non-negative gaps.
            let mut order: Vec<usize> = (0..durs.len()).collect();
            rng.shuffle(&mut order);
            let mut onsets = vec![0i64; durs.len()];
            let mut cursor = 0i64;
            for &k in &order {
                onsets[k] = cursor + rng.range_usize(0, 100) as i64;
                cursor = onsets[k] + durs[k] as i64;
            }
            Some(onsets)
        }
        OverlapBucket::Full => match durs.len() {
            1 => None,
            2 => {
                let d1 = durs[1];
                if d1 < nt {
                    return None;
                }
                // Interferer covers the whole target.
                let lead = rng.range_usize(0, d1 - nt) as i64;
                Some(vec![0, -lead])
            }
            _ => {
                let (d1, d2) = (durs[1], durs[2]);
                if d1 + d2 < nt {
                    return None;
                }
                // Two interferers cover [0, c) and [c, nt).
                let c_lo = 1.max(nt.saturating_sub(d2));
                let c_hi = (nt - 1).min(d1);
                if c_lo > c_hi {
                    return None;
                }
                let c = rng.range_usize(c_lo, c_hi);
                let o1 = -(rng.range_usize(0, (d1 - c).min(100)) as i64);
                let o2_lo = (nt as i64) - (d2 as i64);
                let o2 = o2_lo + rng.range_usize(0, (c as i64 - o2_lo).min(100) as usize) as i64;
                Some(vec![0, o1, o2])
            }
        },
        _ => {
            let (w_lo, w_hi) = bucket_overlap_range(bucket, nt)?;
            let w = rng.range_usize(w_lo, w_hi);
            match durs.len() {
                1 => None,
                2 => {
                    let d1 = durs[1];
                    if d1 < w {
                        return None;
                    }
                    // Overlap the target's tail or head with one interferer.
                    let mut cands: Vec<i64> = Vec::new();
                    if nt as i64 - w as i64 >= sh {
                        cands.push(nt as i64 - w as i64);
                    }
                    if d1 as i64 - w as i64 >= sh {
                        cands.push(w as i64 - d1 as i64);
                    }
                    if cands.is_empty() {
                        return None;
                    }
                    let o1 = cands[rng.index(cands.len())];
                    Some(vec![0, o1])
                }
                _ => {
                    // Split w between a head overlap and a tail overlap.
                    let (d1, d2) = (durs[1], durs[2]);
                    let w1_cap = w.min(d1.saturating_sub(shift_frames));
                    let w2_cap = w.min(d2).min(nt.saturating_sub(shift_frames));
                    let w1_lo = w.saturating_sub(w2_cap);
                    if w1_lo > w1_cap {
                        return None;
                    }
                    let w1 = rng.range_usize(w1_lo, w1_cap);
                    let w2 = w - w1;
                    let o1 = if w1 == 0 {
                        -((d1 + rng.range_usize(0, 100)) as i64)
                    } else {
                        w1 as i64 - d1 as i64
                    };
                    let o2 = if w2 == 0 {
                        (nt + rng.range_usize(0, 100)) as i64
                    } else {
                        (nt - w2) as i64
                    };
                    Some(vec![0, o1, o2])
                }
            }
        }
    }
}

/// Frame-domain activity check for a placement, before any synthesis.
fn placement_ok(
    durs: &[usize],
    onsets: &[i64],
    bucket: OverlapBucket,
    shift_frames: usize,
) -> bool {
    // Pairwise onset separation (waived for the full bucket, where exact
    // alignment can be the only way to cover the target).
    if bucket != OverlapBucket::Full {
        for i in 0..onsets.len() {
            for j in i + 1..onsets.len() {
                if (onsets[i] - onsets[j]).unsigned_abs() < shift_frames as u64 {
                    return false;
                }
            }
        }
    }
    let t0 = onsets[0];
    let (mut ov, mut tg) = (0usize, 0usize);
    for t in t0..t0 + durs[0] as i64 {
        tg += 1;
        let other = onsets
            .iter()
            .zip(durs)
            .skip(1)
            .any(|(&o, &d)| t >= o && t < o + d as i64);
        if other {
            ov += 1;
        }
    }
    bucket.contains_frames_strict(ov, tg)
}

/// Synthesizes a mixture whose target-overlap ratio falls in `bucket`.
///
/// `speakers[0]` is the target. Placement is retried until the realized
/// frame-level ratio lies strictly inside the bucket, so the continuous
/// ratio recomputed from the annotation classifies identically.
pub fn synth_mixture(
    speakers: &[&SyntheticSpeaker],
    durations_s: &[f64],
    bucket: OverlapBucket,
    cfg: &SynthConfig,
    rng: &mut Prng,
) -> Result<Mixture, SynthError> {
    validate_mixture_speakers(speakers, durations_s, 3)?;
    if speakers.len() == 1 && bucket != OverlapBucket::Zero {
        return Err(SynthError::Invalid {
            what: format!("bucket {bucket} requires at least 2 speakers"),
        });
    }
    let shift = cfg.frame_shift_s;
    let durs: Vec<usize> = durations_s.iter().map(|&d| to_frames(d, shift)).collect();
    let shift_frames = to_frames(cfg.shift_min_s, shift);

    let attempts = cfg.max_retries.max(1);
    for _ in 0..attempts {
        let Some(onsets) = propose_onsets(&durs, bucket, shift_frames, rng) else {
            continue;
        };
        if !placement_ok(&durs, &onsets, bucket, shift_frames) {
            continue;
        }
        let base = *onsets.iter().min().expect("non-empty");
        let events: Vec<Event> = onsets
            .iter()
            .zip(&durs)
            .enumerate()
            .map(|(k, (&o, &d))| Event {
                speaker: k,
                onset: (o - base) as usize,
                dur: d,
            })
            .collect();
        let t_total = events.iter().map(|e| e.onset + e.dur).max().expect("events");
        let (features, annotation) = synth_from_events(speakers, &events, t_total, cfg, rng)?;
        let overlap_ratio = annotation.overlap_ratio(&speakers[0].id)?;
        debug_assert!(bucket.contains(overlap_ratio));
        return Ok(Mixture {
            features,
            annotation,
            target_id: speakers[0].id.clone(),
            overlap_ratio,
        });
    }
    Err(SynthError::InfeasibleBucket { bucket, attempts })
}

/// Synthesizes a fixed-length training mixture with unconstrained overlap.
///
/// Clips land uniformly inside the span; `speakers[0]` is the default
/// target (training rotates targets via [`Mixture::masks_for`]).
pub fn synth_training_mixture(
    speakers: &[&SyntheticSpeaker],
    span_frames: usize,
    cfg: &SynthConfig,
    rng: &mut Prng,
) -> Result<Mixture, SynthError> {
    let durations: Vec<f64> = (0..speakers.len())
        .map(|_| rng.range_f64(2.0, 4.0))
        .collect();
    validate_mixture_speakers(speakers, &durations, 3)?;
    if span_frames == 0 {
        return Err(SynthError::Invalid {
            what: "zero-length training span".into(),
        });
    }
    let events: Vec<Event> = speakers
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let dur = to_frames(durations[k], cfg.frame_shift_s).min(span_frames);
            Event {
                speaker: k,
                onset: rng.range_usize(0, span_frames - dur),
                dur,
            }
        })
        .collect();
    let (features, annotation) = synth_from_events(speakers, &events, span_frames, cfg, rng)?;
    let overlap_ratio = annotation.overlap_ratio(&speakers[0].id)?;
    Ok(Mixture {
        features,
        annotation,
        target_id: speakers[0].id.clone(),
        overlap_ratio,
    })
}

/// Rescales the time spent on non-target speech, the knob behind the
/// duration-robustness sweeps.
///
/// Every maximal frame run where the target is silent but some other
/// speaker is active is deleted (`m = 0`), kept (`m = 1`), or tiled
/// verbatim to `ceil(m * len)` frames. Target frames are untouched and the
/// annotation is rebuilt so that re-rasterizing it reproduces the scaled
/// masks exactly.
pub fn scale_nontarget_duration(mix: &Mixture, m: f64) -> Result<Mixture, SynthError> {
    if !(m.is_finite() && m >= 0.0) {
        return Err(SynthError::InvalidScale { m });
    }
    if m == 1.0 {
        return Ok(mix.clone());
    }
    let t_n = mix.features.num_frames();
    let shift = mix.features.frame_shift_s;
    let mask = mix.masks()?;

    // Maximal runs of non-target-only frames.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < t_n {
        if !mask.q_target[t] && mask.q_nontarget[t] {
            let start = t;
            while t < t_n && !mask.q_target[t] && mask.q_nontarget[t] {
                t += 1;
            }
            runs.push((start, t));
        } else {
            t += 1;
        }
    }
    if runs.is_empty() {
        return Err(SynthError::NoNontargetOnlyFrames);
    }

    // Frame index map: straight copies outside runs, cyclic tiling inside.
    let mut idx: Vec<usize> = Vec::with_capacity(t_n);
    let mut cursor = 0;
    for &(a, b) in &runs {
        idx.extend(cursor..a);
        let len = b - a;
        let new_len = (m * len as f64).ceil() as usize;
        idx.extend((0..new_len).map(|j| a + j % len));
        cursor = b;
    }
    idx.extend(cursor..t_n);

    let features = mix.features.gather_frames(&idx)?;

    // Rebuild each speaker's intervals from their scaled frame activity.
    let mut speakers_out = Vec::new();
    for sa in &mix.annotation.speakers {
        let row = rasterize_speaker(&mix.annotation, &sa.speaker, t_n, shift)?;
        let scaled: Vec<bool> = idx.iter().map(|&i| row[i]).collect();
        let intervals = bool_runs_to_intervals(&scaled, shift)?;
        if intervals.is_empty() {
            continue;
        }
        speakers_out.push(SpeakerActivity {
            speaker: sa.speaker.clone(),
            intervals,
        });
    }
    let annotation = ActivityAnnotation::new(speakers_out)?;
    let overlap_ratio = annotation.overlap_ratio(&mix.target_id)?;
    Ok(Mixture {
        features,
        annotation,
        target_id: mix.target_id.clone(),
        overlap_ratio,
    })
}

/// Converts maximal true-runs of a frame mask into frame-aligned intervals.
fn bool_runs_to_intervals(row: &[bool], shift: f64) -> Result<Vec<Interval>, SynthError> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < row.len() {
        if row[t] {
            let start = t;
            while t < row.len() && row[t] {
                t += 1;
            }
            out.push(Interval::new(start as f64 * shift, t as f64 * shift)?);
        } else {
            t += 1;
        }
    }
    Ok(out)
}

/// Synthesizes a turn-taking conversation for the diarization pipeline.
///
/// Speakers take turns in shuffled rounds; consecutive turns may overlap
/// by up to half a second or leave a short gap.
pub fn synth_conversation(
    speakers: &[&SyntheticSpeaker],
    n_turns: usize,
    cfg: &SynthConfig,
    rng: &mut Prng,
) -> Result<(FeatureSequence, ActivityAnnotation), SynthError> {
    if speakers.is_empty() {
        return Err(SynthError::InsufficientSpeakers {
            needed: 1,
            got: 0,
        });
    }
    if n_turns < speakers.len() {
        return Err(SynthError::Invalid {
            what: format!(
                "{} turns cannot cover {} speakers",
                n_turns,
                speakers.len()
            ),
        });
    }
    let n = speakers.len();
    let mut order: Vec<usize> = Vec::with_capacity(n_turns);
    while order.len() < n_turns {
        let mut round: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut round);
        if order.last() == round.first() {
            round.rotate_left(1);
        }
        order.extend(round);
    }
    order.truncate(n_turns);

    let shift = cfg.frame_shift_s;
    let max_lead = to_frames(0.5, shift) as i64;
    let mut events = Vec::with_capacity(n_turns);
    let mut cursor = 0i64;
    for &k in &order {
        let dur = to_frames(rng.range_f64(2.0, 4.0), shift);
        let delta = rng.range_usize(0, (max_lead + to_frames(0.3, shift) as i64) as usize) as i64
            - max_lead;
        let onset = (cursor + delta).max(0);
        events.push(Event {
            speaker: k,
            onset: onset as usize,
            dur,
        });
        cursor = onset + dur as i64;
    }
    let t_total = events.iter().map(|e| e.onset + e.dur).max().expect("turns");
    synth_from_events(speakers, &events, t_total, cfg, rng)
}
