//! End-to-end audio front-end: waveform → WAV file → samples → log mel
//! features → frame-grid activity masks, with the RTTM annotation format
//! round-tripping alongside.

use maskedembed::features::logmel::{logmel, mel_center_frequencies, LogMelConfig};
use maskedembed::features::rttm::{parse_rttm, write_rttm, RttmSegment};
use maskedembed::features::wav::{load_wav, write_wav_pcm16};
use maskedembed::features::{
    rasterize_activities, ActivityAnnotation, Interval, SpeakerActivity,
};
use std::f64::consts::PI;

const SAMPLE_RATE: u32 = 16_000;

/// A tone burst: `freq_hz` sine over `[onset_s, offset_s)`, silence elsewhere.
fn tone_burst(total_s: f64, onset_s: f64, offset_s: f64, freq_hz: f64) -> Vec<f64> {
    let n = (total_s * SAMPLE_RATE as f64).round() as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            if t >= onset_s && t < offset_s {
                0.5 * (2.0 * PI * freq_hz * t).sin()
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn wav_round_trip_is_within_quantization() {
    let samples = tone_burst(0.3, 0.05, 0.25, 440.0);
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("tone.wav");
    write_wav_pcm16(&path, &samples).expect("write");
    let back = load_wav(&path).expect("read");
    assert_eq!(back.len(), samples.len());
    let worst = samples
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    // 16-bit quantization: half a step of 2 / 65536.
    assert!(worst <= 1.0 / 32768.0, "worst deviation {worst}");
}

#[test]
fn tone_energy_lands_in_the_matching_mel_bin() {
    let freq = 1200.0;
    let samples = tone_burst(1.0, 0.0, 1.0, freq);
    let cfg = LogMelConfig {
        n_mels: 40,
        mean_normalize: false,
        ..LogMelConfig::default()
    };
    let feats = logmel(&samples, SAMPLE_RATE, &cfg).expect("logmel");
    assert_eq!(feats.num_features(), 40);
    assert!(feats.num_frames() > 90);
    assert!(feats.frames.data().iter().all(|v| v.is_finite()));

    // Average each bin over frames and find the most energetic one.
    let (f_n, t_n) = (feats.num_features(), feats.num_frames());
    let data = feats.frames.data();
    let mean_of = |bin: usize| data[bin * t_n..(bin + 1) * t_n].iter().sum::<f64>() / t_n as f64;
    let loudest = (0..f_n)
        .max_by(|&a, &b| mean_of(a).total_cmp(&mean_of(b)))
        .expect("bins");
    let centers = mel_center_frequencies(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz);
    let nearest = (0..f_n)
        .min_by(|&a, &b| {
            (centers[a] - freq).abs().total_cmp(&(centers[b] - freq).abs())
        })
        .expect("bins");
    assert!(
        (loudest as i64 - nearest as i64).abs() <= 1,
        "tone at {freq} Hz peaked in bin {loudest} (center {:.0} Hz), expected near bin {nearest} (center {:.0} Hz)",
        centers[loudest],
        centers[nearest]
    );
}

#[test]
fn mean_normalization_zeroes_every_bin_mean() {
    let samples = tone_burst(0.5, 0.1, 0.4, 800.0);
    let cfg = LogMelConfig {
        n_mels: 24,
        ..LogMelConfig::default()
    };
    let feats = logmel(&samples, SAMPLE_RATE, &cfg).expect("logmel");
    let t_n = feats.num_frames();
    let data = feats.frames.data();
    for bin in 0..feats.num_features() {
        let mean = data[bin * t_n..(bin + 1) * t_n].iter().sum::<f64>() / t_n as f64;
        assert!(mean.abs() < 1e-9, "bin {bin} mean {mean}");
    }
}

#[test]
fn masks_follow_the_annotation_on_the_frame_grid() {
    let annotation = ActivityAnnotation::new(vec![
        SpeakerActivity {
            speaker: "alice".into(),
            intervals: vec![Interval::new(0.0, 1.0).expect("interval")],
        },
        SpeakerActivity {
            speaker: "bob".into(),
            intervals: vec![Interval::new(0.5, 1.5).expect("interval")],
        },
    ])
    .expect("annotation");
    let mask = rasterize_activities(&annotation, "alice", 150, 0.01).expect("mask");
    // Frame centers (t + 0.5) * 0.01: alice covers centers below 1.0 →
    // frames 0..=99; bob covers 0.5..1.5 → frames 50..=149.
    assert_eq!(mask.q_target.iter().filter(|&&b| b).count(), 100);
    assert_eq!(mask.q_nontarget.iter().filter(|&&b| b).count(), 100);
    assert!(mask.q_target[99] && !mask.q_target[100]);
    assert!(!mask.q_nontarget[49] && mask.q_nontarget[50]);

    // The same annotation survives RTTM serialization.
    let segments: Vec<RttmSegment> = annotation
        .speakers
        .iter()
        .flat_map(|sa| {
            sa.intervals.iter().map(|iv| RttmSegment {
                recording: "rec0".into(),
                onset_s: iv.onset_s,
                duration_s: iv.offset_s - iv.onset_s,
                speaker: sa.speaker.clone(),
            })
        })
        .collect();
    let mut bytes = Vec::new();
    write_rttm(&mut bytes, &segments).expect("write rttm");
    let parsed = parse_rttm(bytes.as_slice()).expect("parse rttm");
    assert_eq!(parsed.len(), segments.len());
    for (a, b) in segments.iter().zip(&parsed) {
        assert_eq!(a.recording, b.recording);
        assert_eq!(a.speaker, b.speaker);
        assert!((a.onset_s - b.onset_s).abs() < 1e-9);
        assert!((a.duration_s - b.duration_s).abs() < 1e-9);
    }
}
