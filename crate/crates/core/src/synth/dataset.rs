//! Verification trial sets, noise augmentation, and a waveform source.

use super::{
    synth_mixture, Mixture, OverlapBucket, SynthConfig, SynthError, SyntheticSpeaker,
};
use crate::features::FeatureSequence;
use crate::rng::Prng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Verification protocol: clean test clips or overlapped mixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialProtocol {
    OneVsOne,
    OneVsMany,
}

/// Shape of a generated trial set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialSetConfig {
    pub protocol: TrialProtocol,
    /// Speakers in the evaluation bank the trials draw from.
    pub n_speakers: usize,
    /// Total trials; must be even so labels balance exactly.
    pub n_trials: usize,
    /// Overlap buckets cycled across one-vs-many trials.
    pub buckets: Vec<OverlapBucket>,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Interfering speakers per test mixture (one-vs-many).
    pub interferers: usize,
}

impl Default for TrialSetConfig {
    fn default() -> Self {
        Self {
            protocol: TrialProtocol::OneVsMany,
            n_speakers: 16,
            n_trials: 200,
            buckets: OverlapBucket::ALL.to_vec(),
            min_duration_s: 2.0,
            max_duration_s: 4.0,
            interferers: 2,
        }
    }
}

/// One verification trial: a clean enrollment clip against a test mixture.
#[derive(Debug, Clone)]
pub struct Trial {
    pub id: String,
    pub enroll_speaker: String,
    /// Clean single-speaker enrollment recording.
    pub enroll: Mixture,
    /// Test recording; its `target_id` defines the claimed identity.
    pub test: Mixture,
    pub same_speaker: bool,
    pub bucket: OverlapBucket,
}

/// A balanced set of verification trials.
#[derive(Debug, Clone)]
pub struct TrialSet {
    pub trials: Vec<Trial>,
}

/// Builds a balanced trial set: even trials are same-speaker, odd trials
/// different-speaker, and one-vs-many buckets cycle round-robin per
/// same/different pair, so every bucket sees both labels and per-bucket
/// counts differ by at most one pair.
pub fn build_trial_set(
    bank: &[SyntheticSpeaker],
    cfg: &TrialSetConfig,
    synth_cfg: &SynthConfig,
    seed: u64,
) -> Result<TrialSet, SynthError> {
    if bank.len() < 4 {
        return Err(SynthError::InsufficientSpeakers {
            needed: 4,
            got: bank.len(),
        });
    }
    if cfg.n_trials == 0 || cfg.n_trials % 2 != 0 {
        return Err(SynthError::Invalid {
            what: format!("n_trials must be even and positive, got {}", cfg.n_trials),
        });
    }
    if cfg.buckets.is_empty() {
        return Err(SynthError::Invalid {
            what: "no overlap buckets requested".into(),
        });
    }
    if cfg.interferers == 0 || cfg.interferers > 2 {
        return Err(SynthError::Invalid {
            what: format!("interferers must be 1 or 2, got {}", cfg.interferers),
        });
    }

    let mut trials = Vec::with_capacity(cfg.n_trials);
    for i in 0..cfg.n_trials {
        let mut rng = Prng::derive(seed, i as u64);
        let same_speaker = i % 2 == 0;
        let enroll_idx = rng.index(bank.len());
        let target_idx = if same_speaker {
            enroll_idx
        } else {
            let mut k = rng.index(bank.len() - 1);
            if k >= enroll_idx {
                k += 1;
            }
            k
        };

        let enroll_dur = rng.range_f64(cfg.min_duration_s, cfg.max_duration_s);
        let enroll = synth_mixture(
            &[&bank[enroll_idx]],
            &[enroll_dur],
            OverlapBucket::Zero,
            synth_cfg,
            &mut rng,
        )?;

        let (bucket, test) = match cfg.protocol {
            TrialProtocol::OneVsOne => {
                let dur = rng.range_f64(cfg.min_duration_s, cfg.max_duration_s);
                let test = synth_mixture(
                    &[&bank[target_idx]],
                    &[dur],
                    OverlapBucket::Zero,
                    synth_cfg,
                    &mut rng,
                )?;
                (OverlapBucket::Zero, test)
            }
            TrialProtocol::OneVsMany => {
                let bucket = cfg.buckets[(i / 2) % cfg.buckets.len()];
                let mut others: Vec<usize> = (0..bank.len()).filter(|&k| k != target_idx).collect();
                rng.shuffle(&mut others);
                others.truncate(cfg.interferers);
                let speakers: Vec<&SyntheticSpeaker> = std::iter::once(&bank[target_idx])
                    .chain(others.iter().map(|&k| &bank[k]))
                    .collect();
                let target_dur = rng.range_f64(cfg.min_duration_s, cfg.max_duration_s);
                let mut durations = vec![target_dur];
                for _ in 0..cfg.interferers {
                    // A lone interferer must outlast the target to reach the
                    // high-overlap buckets.
                    let d = if cfg.interferers == 1
                        && matches!(bucket, OverlapBucket::From75 | OverlapBucket::Full)
                    {
                        rng.range_f64(target_dur + 0.6, target_dur + 1.6)
                    } else {
                        rng.range_f64(cfg.min_duration_s, cfg.max_duration_s)
                    };
                    durations.push(d);
                }
                let test = synth_mixture(&speakers, &durations, bucket, synth_cfg, &mut rng)?;
                (bucket, test)
            }
        };

        trials.push(Trial {
            id: format!("t{i:05}"),
            enroll_speaker: bank[enroll_idx].id.clone(),
            enroll,
            test,
            same_speaker,
            bucket,
        });
    }
    Ok(TrialSet { trials })
}

/// Spectral shape of additive feature-domain noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Equal mean energy in every bin.
    White,
    /// Mean energy falling off as 1 / (bin + 1).
    Pink,
}

/// Adds noise at a given signal-to-noise ratio, in the linear energy domain.
///
/// The noise's mean total energy is `10^(-snr_db / 10)` times the input's
/// mean energy, shaped per [`NoiseKind`], with log-normal texture.
pub fn add_noise(
    features: &FeatureSequence,
    kind: NoiseKind,
    snr_db: f64,
    rng: &mut Prng,
) -> Result<FeatureSequence, SynthError> {
    if !snr_db.is_finite() {
        return Err(SynthError::Invalid {
            what: format!("non-finite SNR {snr_db}"),
        });
    }
    let (f_n, t_n) = (features.num_features(), features.num_frames());
    let src = features.frames.data();
    let linear: Vec<f64> = src.iter().map(|&v| v.exp()).collect();
    let speech_power = linear.iter().sum::<f64>() / linear.len() as f64;
    let noise_power = speech_power * 10f64.powf(-snr_db / 10.0);

    let mut weights: Vec<f64> = (0..f_n)
        .map(|i| match kind {
            NoiseKind::White => 1.0,
            NoiseKind::Pink => 1.0 / (i as f64 + 1.0),
        })
        .collect();
    let mean_w = weights.iter().sum::<f64>() / f_n as f64;
    for w in &mut weights {
        *w /= mean_w;
    }

    const TEXTURE_STD: f64 = 0.3;
    let correction = (-0.5 * TEXTURE_STD * TEXTURE_STD).exp();
    let mut out = vec![0.0; linear.len()];
    for i in 0..f_n {
        for t in 0..t_n {
            let texture = (TEXTURE_STD * rng.gaussian()).exp() * correction;
            out[i * t_n + t] = (linear[i * t_n + t] + noise_power * weights[i] * texture).ln();
        }
    }
    Ok(FeatureSequence {
        frames: Tensor::from_vec(vec![f_n, t_n], out)?,
        frame_shift_s: features.frame_shift_s,
        frame_length_s: features.frame_length_s,
    })
}

/// Renders a speaker as an audible harmonic tone complex.
///
/// This is the waveform analogue of the feature-space synthesizer: the
/// fundamental follows the pitch band, harmonic amplitudes follow the
/// envelope, and the amplitude modulation matches the speaker's rate.
pub fn synth_waveform(
    speaker: &SyntheticSpeaker,
    duration_s: f64,
    sample_rate: u32,
    rng: &mut Prng,
) -> Vec<f64> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    let f0 = 90.0 + 8.0 * speaker.pitch_center;
    let harmonics = 10;
    let amps: Vec<f64> = (0..harmonics)
        .map(|k| (0.4 * speaker.envelope[k % speaker.envelope.len()]).exp() / (k + 1) as f64)
        .collect();
    let phases: Vec<f64> = (0..harmonics)
        .map(|_| rng.range_f64(0.0, std::f64::consts::TAU))
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut peak = 0.0f64;
    for s in 0..n {
        let t = s as f64 / sample_rate as f64;
        let m = 1.0
            + speaker.modulation_depth
                * (std::f64::consts::TAU * speaker.modulation_rate_hz * t).sin();
        let mut v = 0.0;
        for k in 0..harmonics {
            v += amps[k] * (std::f64::consts::TAU * (k + 1) as f64 * f0 * t + phases[k]).sin();
        }
        v = v * m + 0.005 * rng.gaussian();
        peak = peak.max(v.abs());
        out.push(v);
    }
    if peak > 0.0 {
        let gain = 0.6 / peak;
        for v in &mut out {
            *v *= gain;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::synth_speaker_bank;
    use super::*;

    fn setup(n: usize) -> (Vec<SyntheticSpeaker>, SynthConfig) {
        let cfg = SynthConfig::default();
        let bank = synth_speaker_bank(42, n, &cfg).expect("bank");
        (bank, cfg)
    }

    #[test]
    fn trial_sets_balance_labels_exactly() {
        let (bank, scfg) = setup(6);
        let cfg = TrialSetConfig {
            n_trials: 100,
            buckets: vec![OverlapBucket::UpTo25],
            ..TrialSetConfig::default()
        };
        let set = build_trial_set(&bank, &cfg, &scfg, 1).expect("trials");
        assert_eq!(set.trials.len(), 100);
        let same = set.trials.iter().filter(|t| t.same_speaker).count();
        assert_eq!(same, 50);
        for t in &set.trials {
            assert_eq!(t.same_speaker, t.enroll_speaker == t.test.target_id);
        }
    }

    #[test]
    fn one_vs_one_tests_are_clean() {
        let (bank, scfg) = setup(5);
        let cfg = TrialSetConfig {
            protocol: TrialProtocol::OneVsOne,
            n_trials: 20,
            ..TrialSetConfig::default()
        };
        let set = build_trial_set(&bank, &cfg, &scfg, 2).expect("trials");
        for t in &set.trials {
            assert_eq!(t.test.overlap_ratio, 0.0);
            assert_eq!(t.bucket, OverlapBucket::Zero);
            assert_eq!(t.test.annotation.speakers.len(), 1);
        }
    }

    #[test]
    fn buckets_cycle_per_pair_and_see_both_labels() {
        let (bank, scfg) = setup(6);
        let buckets = vec![
            OverlapBucket::Zero,
            OverlapBucket::UpTo25,
            OverlapBucket::From25,
        ];
        let cfg = TrialSetConfig {
            n_trials: 50,
            buckets: buckets.clone(),
            ..TrialSetConfig::default()
        };
        let set = build_trial_set(&bank, &cfg, &scfg, 3).expect("trials");
        for b in &buckets {
            let in_bucket: Vec<_> = set.trials.iter().filter(|t| t.bucket == *b).collect();
            // 25 pairs over 3 buckets: 9 + 8 + 8.
            assert!(
                in_bucket.len() == 16 || in_bucket.len() == 18,
                "bucket {b} count {}",
                in_bucket.len()
            );
            assert!(in_bucket.iter().any(|t| t.same_speaker));
            assert!(in_bucket.iter().any(|t| !t.same_speaker));
            for t in &in_bucket {
                assert!(b.contains(t.test.overlap_ratio));
            }
        }
    }

    #[test]
    fn enrollments_are_clean_single_speaker_clips() {
        let (bank, scfg) = setup(5);
        let cfg = TrialSetConfig {
            n_trials: 12,
            ..TrialSetConfig::default()
        };
        let set = build_trial_set(&bank, &cfg, &scfg, 4).expect("trials");
        for t in &set.trials {
            assert_eq!(t.enroll.annotation.speakers.len(), 1);
            assert_eq!(t.enroll.annotation.speakers[0].speaker, t.enroll_speaker);
            assert_eq!(t.enroll.overlap_ratio, 0.0);
        }
    }

    #[test]
    fn trial_sets_are_deterministic() {
        let (bank, scfg) = setup(5);
        let cfg = TrialSetConfig {
            n_trials: 10,
            ..TrialSetConfig::default()
        };
        let a = build_trial_set(&bank, &cfg, &scfg, 9).expect("trials");
        let b = build_trial_set(&bank, &cfg, &scfg, 9).expect("trials");
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.same_speaker, y.same_speaker);
            assert_eq!(x.test.features.frames.data(), y.test.features.frames.data());
        }
    }

    #[test]
    fn too_few_speakers_are_rejected() {
        let (bank, scfg) = setup(4);
        let cfg = TrialSetConfig::default();
        assert!(matches!(
            build_trial_set(&bank[..3], &cfg, &scfg, 0),
            Err(SynthError::InsufficientSpeakers { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn noise_raises_total_energy_by_the_requested_amount() {
        let (bank, scfg) = setup(2);
        let mut rng = Prng::seed(5);
        let mix = synth_mixture(
            &[&bank[0]],
            &[3.0],
            OverlapBucket::Zero,
            &scfg,
            &mut rng,
        )
        .expect("mixture");
        let before: f64 = mix.features.frames.data().iter().map(|v| v.exp()).sum();
        for (snr, q) in [(0.0, 1.0), (10.0, 0.1)] {
            let noisy =
                add_noise(&mix.features, NoiseKind::White, snr, &mut rng).expect("noise");
            let after: f64 = noisy.frames.data().iter().map(|v| v.exp()).sum();
            let ratio = after / before;
            assert!(
                (ratio - (1.0 + q)).abs() < 0.1 * q,
                "snr {snr}: energy ratio {ratio}"
            );
        }
    }

    #[test]
    fn pink_noise_concentrates_in_low_bins() {
        let (bank, scfg) = setup(2);
        let mut rng = Prng::seed(6);
        let mix = synth_mixture(
            &[&bank[0]],
            &[3.0],
            OverlapBucket::Zero,
            &scfg,
            &mut rng,
        )
        .expect("mixture");
        let noisy = add_noise(&mix.features, NoiseKind::Pink, 0.0, &mut rng).expect("noise");
        let (f_n, t_n) = (mix.features.num_features(), mix.features.num_frames());
        let added = |bin: usize| -> f64 {
            (0..t_n)
                .map(|t| {
                    noisy.frames.data()[bin * t_n + t].exp()
                        - mix.features.frames.data()[bin * t_n + t].exp()
                })
                .sum()
        };
        let low = added(0);
        let high = added(f_n - 1);
        assert!(
            low > 5.0 * high,
            "pink noise should tilt low: bin0 {low}, last {high}"
        );
    }

    #[test]
    fn waveforms_are_bounded_and_deterministic() {
        let (bank, _) = setup(2);
        let mut rng = Prng::seed(7);
        let wav = synth_waveform(&bank[0], 1.5, 16_000, &mut rng);
        assert_eq!(wav.len(), 24_000);
        assert!(wav.iter().all(|s| s.abs() <= 0.6 + 1e-12));
        assert!(wav.iter().any(|s| s.abs() > 0.1));
        let mut rng2 = Prng::seed(7);
        let again = synth_waveform(&bank[0], 1.5, 16_000, &mut rng2);
        assert_eq!(wav, again);
    }
}
