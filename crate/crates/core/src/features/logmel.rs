//! Log mel-filterbank features from raw waveforms.
//!
//! Frames are Hamming-windowed, zero-padded to the next power of two, and
//! run through an FFT; the power spectrum is pooled by triangular filters
//! spaced evenly on the mel scale (`2595 * log10(1 + f/700)`), floored, and
//! logged. Frame count over `N` samples is `floor((N - window) / shift) + 1`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureError, FeatureSequence};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMelConfig {
    pub n_mels: usize,
    pub window_s: f64,
    pub shift_s: f64,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Power floor applied before the log, keeping silence finite.
    pub floor: f64,
    /// Subtract the per-bin mean over frames after the log.
    pub mean_normalize: bool,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_s: 0.025,
            shift_s: 0.010,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            floor: 1e-10,
            mean_normalize: true,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_center_frequencies(n_mels: usize, fmin_hz: f64, fmax_hz: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
    (1..=n_mels)
        .map(|i| mel_to_hz(lo + i as f64 * (hi - lo) / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels` rows over `n_fft/2 + 1` spectrum bins.
fn mel_filterbank(cfg: &LogMelConfig, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let (lo, hi) = (hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz));
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + i as f64 * (hi - lo) / (cfg.n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    let mut bank = vec![vec![0.0; n_bins]; cfg.n_mels];
    for (m, row) in bank.iter_mut().enumerate() {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sample_rate / n_fft as f64;
            *w = if f >= left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f <= right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
    }
    bank
}

/// Computes log mel features for a mono waveform at the given sample rate.
pub fn logmel(
    samples: &[f64],
    sample_rate: u32,
    cfg: &LogMelConfig,
) -> Result<FeatureSequence, FeatureError> {
    let sr = sample_rate as f64;
    let window = (cfg.window_s * sr).round() as usize;
    let shift = (cfg.shift_s * sr).round() as usize;
    if window == 0 || shift == 0 || cfg.n_mels == 0 {
        return Err(FeatureError::Invalid {
            what: "window, shift and n_mels must be positive".into(),
        });
    }
    if samples.len() < window {
        return Err(FeatureError::TooShort {
            samples: samples.len(),
            window,
        });
    }
    let num_frames = (samples.len() - window) / shift + 1;
    let n_fft = window.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg, n_fft, sr);

    let mut out = vec![0.0; cfg.n_mels * num_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for t in 0..num_frames {
        let start = t * shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                Complex::new(samples[start + i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, row) in bank.iter().enumerate() {
            let energy: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
            out[m * num_frames + t] = energy.max(cfg.floor).ln();
        }
    }
    if cfg.mean_normalize {
        for m in 0..cfg.n_mels {
            let row = &mut out[m * num_frames..(m + 1) * num_frames];
            let mean = row.iter().sum::<f64>() / num_frames as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
    }
    Ok(FeatureSequence {
        frames: Tensor::from_vec(vec![cfg.n_mels, num_frames], out).expect("shape matches"),
        frame_shift_s: cfg.shift_s,
        frame_length_s: cfg.window_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_matches_closed_form() {
        let cfg = LogMelConfig::default();
        // 16240 samples at 16 kHz with a 400/160 window/shift:
        // (16240 - 400) / 160 + 1 = 100 frames.
        let fs = logmel(&vec![0.01; 16_240], 16_000, &cfg).unwrap();
        assert_eq!(fs.num_frames(), 100);
        assert_eq!(fs.num_features(), 80);
        // One sample fewer drops the last frame start.
        let fs = logmel(&vec![0.01; 16_239], 16_000, &cfg).unwrap();
        assert_eq!(fs.num_frames(), 99);
    }

    #[test]
    fn shorter_than_one_window_is_an_error() {
        let err = logmel(&vec![0.0; 399], 16_000, &LogMelConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            FeatureError::TooShort {
                samples: 399,
                window: 400
            }
        ));
    }

    #[test]
    fn silence_hits_the_floor_everywhere() {
        let cfg = LogMelConfig {
            mean_normalize: false,
            ..LogMelConfig::default()
        };
        let fs = logmel(&vec![0.0; 4000], 16_000, &cfg).unwrap();
        let expected = 1e-10f64.ln();
        assert!(fs.frames.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn mean_normalization_zeroes_each_bin() {
        let samples: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.37).sin() * 0.3).collect();
        let fs = logmel(&samples, 16_000, &LogMelConfig::default()).unwrap();
        let (f_n, t_n) = (fs.num_features(), fs.num_frames());
        let data = fs.frames.data();
        for m in 0..f_n {
            let mean: f64 = data[m * t_n..(m + 1) * t_n].iter().sum::<f64>() / t_n as f64;
            assert!(mean.abs() < 1e-9, "bin {m} mean {mean}");
        }
    }

    #[test]
    fn pure_tone_peaks_at_the_matching_filter() {
        let cfg = LogMelConfig {
            mean_normalize: false,
            ..LogMelConfig::default()
        };
        let tone_hz = 1000.0;
        let samples: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * tone_hz * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let fs = logmel(&samples, 16_000, &cfg).unwrap();
        let (f_n, t_n) = (fs.num_features(), fs.num_frames());
        let data = fs.frames.data();
        let mean_energy: Vec<f64> = (0..f_n)
            .map(|m| data[m * t_n..(m + 1) * t_n].iter().sum::<f64>() / t_n as f64)
            .collect();
        let argmax = mean_energy
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let centers = mel_center_frequencies(cfg.n_mels, cfg.fmin_hz, cfg.fmax_hz);
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - tone_hz).abs().total_cmp(&(b.1 - tone_hz).abs()))
            .unwrap()
            .0;
        assert!(
            argmax.abs_diff(nearest) <= 1,
            "argmax {argmax}, nearest center {nearest}"
        );
    }

    #[test]
    fn center_frequencies_are_monotonic_and_bounded() {
        let centers = mel_center_frequencies(40, 0.0, 8000.0);
        assert_eq!(centers.len(), 40);
        for w in centers.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(centers[0] > 0.0 && centers[39] < 8000.0);
    }
}
