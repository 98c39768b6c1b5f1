//! Minimal RIFF/WAVE reader and writer for mono 16 kHz audio.
//!
//! Supports 16-bit PCM and 32-bit IEEE float payloads; everything else is an
//! explicit error rather than a silent resample or downmix.

use std::io::{Read, Write};
use std::path::Path;

use super::FeatureError;

pub const SAMPLE_RATE: u32 = 16_000;

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn malformed(what: impl Into<String>) -> FeatureError {
    FeatureError::MalformedWav { what: what.into() }
}

/// Reads a mono 16 kHz WAV file into `[-1, 1]`-ish f64 samples.
pub fn load_wav(path: &Path) -> Result<Vec<f64>, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_wav(&bytes)
}

/// Decodes WAV bytes; see [`load_wav`].
pub fn decode_wav(bytes: &[u8]) -> Result<Vec<f64>, FeatureError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_le(&bytes[pos + 4..pos + 8]) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(malformed(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("fmt chunk too small"));
                }
                fmt = Some((
                    u16_le(&body[0..2]),
                    u16_le(&body[2..4]),
                    u32_le(&body[4..8]),
                    u16_le(&body[14..16]),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned: odd sizes carry one padding byte.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    if channels != 1 {
        return Err(FeatureError::UnsupportedWavEncoding {
            what: format!("{channels} channels, expected mono"),
        });
    }
    if rate != SAMPLE_RATE {
        return Err(FeatureError::SampleRateMismatch {
            expected: SAMPLE_RATE,
            got: rate,
        });
    }
    match (format, bits) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(malformed("pcm16 data length is odd"));
            }
            Ok(data
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect())
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(malformed("float32 data length not a multiple of 4"));
            }
            Ok(data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect())
        }
        (f, b) => Err(FeatureError::UnsupportedWavEncoding {
            what: format!("format tag {f} with {b} bits; expected pcm16 or float32"),
        }),
    }
}

fn write_riff(
    path: &Path,
    format: u16,
    bits: u16,
    payload: &[u8],
) -> Result<(), FeatureError> {
    let byte_rate = SAMPLE_RATE * (bits as u32 / 8);
    let block_align = bits / 8;
    let mut out = Vec::with_capacity(44 + payload.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Writes mono 16 kHz samples as 16-bit PCM, clamping to `[-1, 1]`.
pub fn write_wav_pcm16(path: &Path, samples: &[f64]) -> Result<(), FeatureError> {
    let mut payload = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_riff(path, 1, 16, &payload)
}

/// Writes mono 16 kHz samples as 32-bit IEEE float.
pub fn write_wav_f32(path: &Path, samples: &[f64]) -> Result<(), FeatureError> {
    let mut payload = Vec::with_capacity(samples.len() * 4);
    for &s in samples {
        payload.extend_from_slice(&(s as f32).to_le_bytes());
    }
    write_riff(path, 3, 32, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    #[test]
    fn pcm16_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let mut rng = Prng::seed(11);
        let samples: Vec<f64> = (0..500).map(|_| rng.range_f64(-0.99, 0.99)).collect();
        write_wav_pcm16(&path, &samples).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn float32_round_trip_is_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..100).map(|i| (i as f32 * 0.013).sin() as f64).collect();
        write_wav_f32(&path, &samples).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn rejects_garbage_header() {
        let err = decode_wav(b"not a wav file at all").unwrap_err();
        assert!(matches!(err, FeatureError::MalformedWav { .. }));
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVE");
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes()); // pcm
        bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0i16.to_le_bytes());
        let err = decode_wav(&bytes).unwrap_err();
        assert!(matches!(
            err,
            FeatureError::SampleRateMismatch {
                expected: 16_000,
                got: 8_000
            }
        ));
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mono.wav");
        write_wav_pcm16(&path, &[0.0, 0.1]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22] = 2; // channel count, low byte
        let err = decode_wav(&bytes).unwrap_err();
        assert!(matches!(err, FeatureError::UnsupportedWavEncoding { .. }));
    }
}
