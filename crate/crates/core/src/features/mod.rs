//! Acoustic features, speaker-activity annotations and frame-level masks.
//!
//! Annotations live in continuous time as half-open intervals `[onset,
//! offset)` per speaker. Masks live on the frame grid of a feature sequence;
//! a frame is active when its *center* falls inside an interval. All audio
//! plumbing (WAV, log mel, RTTM) is here as well.

pub mod logmel;
pub mod rttm;
pub mod wav;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed wav: {what}")]
    MalformedWav { what: String },
    #[error("unsupported wav encoding: {what}")]
    UnsupportedWavEncoding { what: String },
    #[error("sample rate mismatch: expected {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("waveform too short: {samples} samples, need at least {window} for one window")]
    TooShort { samples: usize, window: usize },
    #[error("unknown speaker id: {speaker}")]
    UnknownSpeaker { speaker: String },
    #[error("malformed rttm at line {line}: {what}")]
    MalformedRttm { line: usize, what: String },
    #[error("{what}")]
    Invalid { what: String },
}

/// Half-open time span `[onset_s, offset_s)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Interval {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Interval {
    pub fn new(onset_s: f64, offset_s: f64) -> Result<Self, FeatureError> {
        if !(onset_s.is_finite() && offset_s.is_finite()) || onset_s < 0.0 || offset_s <= onset_s {
            return Err(FeatureError::Invalid {
                what: format!("bad interval [{onset_s}, {offset_s})"),
            });
        }
        Ok(Self { onset_s, offset_s })
    }

    pub fn length(&self) -> f64 {
        self.offset_s - self.onset_s
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.onset_s && t < self.offset_s
    }
}

/// One speaker's activity intervals.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpeakerActivity {
    pub speaker: String,
    pub intervals: Vec<Interval>,
}

/// Who speaks when, for one recording.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ActivityAnnotation {
    pub speakers: Vec<SpeakerActivity>,
}

impl ActivityAnnotation {
    pub fn new(speakers: Vec<SpeakerActivity>) -> Result<Self, FeatureError> {
        for sa in &speakers {
            for iv in &sa.intervals {
                Interval::new(iv.onset_s, iv.offset_s)?;
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for sa in &speakers {
            if !seen.insert(sa.speaker.as_str()) {
                return Err(FeatureError::Invalid {
                    what: format!("duplicate speaker id: {}", sa.speaker),
                });
            }
        }
        Ok(Self { speakers })
    }

    pub fn speaker_ids(&self) -> Vec<&str> {
        self.speakers.iter().map(|s| s.speaker.as_str()).collect()
    }

    pub fn intervals_of(&self, speaker: &str) -> Option<&[Interval]> {
        self.speakers
            .iter()
            .find(|s| s.speaker == speaker)
            .map(|s| s.intervals.as_slice())
    }

    /// Latest interval offset across all speakers (0 when silent).
    pub fn end_time(&self) -> f64 {
        self.speakers
            .iter()
            .flat_map(|s| s.intervals.iter())
            .map(|iv| iv.offset_s)
            .fold(0.0, f64::max)
    }

    /// Fraction of the target's speech time during which at least one other
    /// speaker is also speaking, in continuous time.
    pub fn overlap_ratio(&self, target: &str) -> Result<f64, FeatureError> {
        let target_iv = self
            .intervals_of(target)
            .ok_or_else(|| FeatureError::UnknownSpeaker {
                speaker: target.to_string(),
            })?;
        let target_merged = merge_intervals(target_iv);
        let target_len = total_length(&target_merged);
        if target_len <= 0.0 {
            return Ok(0.0);
        }
        let others: Vec<Interval> = self
            .speakers
            .iter()
            .filter(|s| s.speaker != target)
            .flat_map(|s| s.intervals.iter().copied())
            .collect();
        let others_merged = merge_intervals(&others);
        let overlapped = total_length(&intersect_intervals(&target_merged, &others_merged));
        Ok(overlapped / target_len)
    }
}

/// Sorts and fuses overlapping or touching intervals.
pub fn merge_intervals(intervals: &[Interval]) -> Vec<Interval> {
    let mut sorted: Vec<Interval> = intervals.to_vec();
    sorted.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut out: Vec<Interval> = Vec::with_capacity(sorted.len());
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

/// Pairwise intersection of two merged interval sets.
pub fn intersect_intervals(a: &[Interval], b: &[Interval]) -> Vec<Interval> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].onset_s.max(b[j].onset_s);
        let hi = a[i].offset_s.min(b[j].offset_s);
        if lo < hi {
            out.push(Interval {
                onset_s: lo,
                offset_s: hi,
            });
        }
        if a[i].offset_s <= b[j].offset_s {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

pub fn total_length(intervals: &[Interval]) -> f64 {
    intervals.iter().map(|iv| iv.length()).sum()
}

/// A `[F, T]` matrix of frame features plus its time base.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// Feature matrix, `F` rows by `T` frame columns, row-major.
    pub frames: Tensor,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
}

impl FeatureSequence {
    pub fn num_features(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Time of a frame's center: `(t + 0.5) * shift`.
    pub fn frame_center_s(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.frame_shift_s
    }

    /// New sequence holding the given frame columns, in the given order.
    pub fn gather_frames(&self, idx: &[usize]) -> Result<FeatureSequence, FeatureError> {
        let (f_n, t_n) = (self.num_features(), self.num_frames());
        if let Some(&bad) = idx.iter().find(|&&i| i >= t_n) {
            return Err(FeatureError::Invalid {
                what: format!("frame index {bad} out of range for {t_n} frames"),
            });
        }
        let src = self.frames.data();
        let mut out = vec![0.0; f_n * idx.len()];
        for f in 0..f_n {
            for (col, &i) in idx.iter().enumerate() {
                out[f * idx.len() + col] = src[f * t_n + i];
            }
        }
        Ok(FeatureSequence {
            frames: Tensor::from_vec(vec![f_n, idx.len()], out).expect("shape matches"),
            frame_shift_s: self.frame_shift_s,
            frame_length_s: self.frame_length_s,
        })
    }
}

/// Frame-level target / non-target activity, aligned with a feature sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMask {
    pub q_target: Vec<bool>,
    pub q_nontarget: Vec<bool>,
}

impl ActivityMask {
    pub fn len(&self) -> usize {
        self.q_target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_target.is_empty()
    }

    /// Number of target-active frames.
    pub fn target_count(&self) -> usize {
        self.q_target.iter().filter(|&&b| b).count()
    }
}

/// Rasterizes one speaker's intervals onto the frame grid: frame `t` is
/// active when its center `(t + 0.5) * shift` lies inside some interval.
pub fn rasterize_speaker(
    annotation: &ActivityAnnotation,
    speaker: &str,
    num_frames: usize,
    frame_shift_s: f64,
) -> Result<Vec<bool>, FeatureError> {
    let intervals = annotation
        .intervals_of(speaker)
        .ok_or_else(|| FeatureError::UnknownSpeaker {
            speaker: speaker.to_string(),
        })?;
    let mut row = vec![false; num_frames];
    for (t, slot) in row.iter_mut().enumerate() {
        let center = (t as f64 + 0.5) * frame_shift_s;
        *slot = intervals.iter().any(|iv| iv.contains(center));
    }
    Ok(row)
}

/// Builds the target / non-target mask pair for one target speaker.
///
/// `q_nontarget[t]` is true when any *other* speaker is active at frame `t`.
/// A target with no active frames is representable (all-false row).
pub fn rasterize_activities(
    annotation: &ActivityAnnotation,
    target: &str,
    num_frames: usize,
    frame_shift_s: f64,
) -> Result<ActivityMask, FeatureError> {
    let q_target = rasterize_speaker(annotation, target, num_frames, frame_shift_s)?;
    let mut q_nontarget = vec![false; num_frames];
    for sa in &annotation.speakers {
        if sa.speaker == target {
            continue;
        }
        for (t, slot) in q_nontarget.iter_mut().enumerate() {
            if !*slot {
                let center = (t as f64 + 0.5) * frame_shift_s;
                *slot = sa.intervals.iter().any(|iv| iv.contains(center));
            }
        }
    }
    Ok(ActivityMask {
        q_target,
        q_nontarget,
    })
}

/// OR-pools a boolean mask by `stride`: output frame `i` is true when any of
/// input frames `i*stride .. (i+1)*stride` is true. Output length is
/// `ceil(T / stride)`.
pub fn downsample_mask(mask: &[bool], stride: usize) -> Result<Vec<bool>, FeatureError> {
    if stride == 0 {
        return Err(FeatureError::Invalid {
            what: "stride must be at least 1".into(),
        });
    }
    Ok(mask.chunks(stride).map(|c| c.iter().any(|&b| b)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: f64, b: f64) -> Interval {
        Interval::new(a, b).unwrap()
    }

    fn two_speaker_annotation() -> ActivityAnnotation {
        ActivityAnnotation::new(vec![
            SpeakerActivity {
                speaker: "alice".into(),
                intervals: vec![iv(0.0, 0.5)],
            },
            SpeakerActivity {
                speaker: "bob".into(),
                intervals: vec![iv(0.25, 1.0)],
            },
        ])
        .unwrap()
    }

    #[test]
    fn interval_rejects_degenerate_spans() {
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
        assert!(Interval::new(-0.5, 1.0).is_err());
    }

    #[test]
    fn rasterize_uses_frame_centers() {
        // 10 ms shift: centers 0.005, 0.015, ... Alice [0, 0.5) covers frames
        // 0..=49, Bob [0.25, 1.0) covers frames 25..=99.
        let ann = two_speaker_annotation();
        let mask = rasterize_activities(&ann, "alice", 100, 0.010).unwrap();
        assert_eq!(mask.target_count(), 50);
        assert!(mask.q_target[49] && !mask.q_target[50]);
        assert!(!mask.q_nontarget[24] && mask.q_nontarget[25]);
        assert_eq!(mask.q_nontarget.iter().filter(|&&b| b).count(), 75);
    }

    #[test]
    fn rasterize_unknown_speaker_is_an_error() {
        let ann = two_speaker_annotation();
        let err = rasterize_activities(&ann, "carol", 100, 0.010).unwrap_err();
        assert!(matches!(err, FeatureError::UnknownSpeaker { .. }));
    }

    #[test]
    fn empty_target_mask_is_representable() {
        let ann = ActivityAnnotation::new(vec![SpeakerActivity {
            speaker: "alice".into(),
            intervals: vec![iv(5.0, 6.0)],
        }])
        .unwrap();
        let mask = rasterize_activities(&ann, "alice", 100, 0.010).unwrap();
        assert_eq!(mask.target_count(), 0);
    }

    #[test]
    fn annotation_rejects_duplicate_speakers() {
        let dup = ActivityAnnotation::new(vec![
            SpeakerActivity {
                speaker: "a".into(),
                intervals: vec![],
            },
            SpeakerActivity {
                speaker: "a".into(),
                intervals: vec![],
            },
        ]);
        assert!(dup.is_err());
    }

    #[test]
    fn overlap_ratio_from_annotation() {
        // Alice speaks 0.5 s, of which [0.25, 0.5) is shared with Bob.
        let ann = two_speaker_annotation();
        let r = ann.overlap_ratio("alice").unwrap();
        assert!((r - 0.5).abs() < 1e-12, "ratio {r}");
        let r_bob = ann.overlap_ratio("bob").unwrap();
        assert!((r_bob - 1.0 / 3.0).abs() < 1e-12, "ratio {r_bob}");
    }

    #[test]
    fn merge_and_intersect_behave() {
        let merged = merge_intervals(&[iv(0.0, 1.0), iv(0.5, 2.0), iv(3.0, 4.0)]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].offset_s, 2.0);
        let inter = intersect_intervals(&merged, &[iv(1.5, 3.5)]);
        assert_eq!(inter.len(), 2);
        assert!((total_length(&inter) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_frames_reorders_columns() {
        let fs = FeatureSequence {
            frames: Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        };
        let g = fs.gather_frames(&[2, 0, 0]).unwrap();
        assert_eq!(g.frames.data(), &[3.0, 1.0, 1.0, 6.0, 4.0, 4.0]);
        assert!(fs.gather_frames(&[3]).is_err());
    }

    #[test]
    fn downsample_mask_is_or_pooling() {
        let mask = vec![false, true, false, false, false, true, true];
        let d = downsample_mask(&mask, 3).unwrap();
        assert_eq!(d, vec![true, true, true]);
        let none = downsample_mask(&[false; 6], 2).unwrap();
        assert_eq!(none, vec![false; 3]);
        assert!(downsample_mask(&mask, 0).is_err());
    }
}
