//! RTTM speaker-segment files.
//!
//! One segment per line:
//! `SPEAKER <recording> 1 <onset> <duration> <NA> <NA> <speaker> <NA> <NA>`.
//! Onsets and durations are written with six decimals.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::{ActivityAnnotation, FeatureError, Interval, SpeakerActivity};

/// One parsed RTTM speaker segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RttmSegment {
    pub recording: String,
    pub onset_s: f64,
    pub duration_s: f64,
    pub speaker: String,
}

/// Parses RTTM lines; blank lines and `;;` comments are skipped.
pub fn parse_rttm(reader: impl BufRead) -> Result<Vec<RttmSegment>, FeatureError> {
    let mut segments = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with(";;") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(FeatureError::MalformedRttm {
                line: lineno,
                what: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        if fields[0] != "SPEAKER" {
            return Err(FeatureError::MalformedRttm {
                line: lineno,
                what: format!("expected SPEAKER record, got {}", fields[0]),
            });
        }
        let onset_s: f64 = fields[3].parse().map_err(|_| FeatureError::MalformedRttm {
            line: lineno,
            what: format!("bad onset {}", fields[3]),
        })?;
        let duration_s: f64 = fields[4].parse().map_err(|_| FeatureError::MalformedRttm {
            line: lineno,
            what: format!("bad duration {}", fields[4]),
        })?;
        if onset_s < 0.0 || duration_s <= 0.0 {
            return Err(FeatureError::MalformedRttm {
                line: lineno,
                what: format!("non-positive span at {onset_s} + {duration_s}"),
            });
        }
        segments.push(RttmSegment {
            recording: fields[1].to_string(),
            onset_s,
            duration_s,
            speaker: fields[7].to_string(),
        });
    }
    Ok(segments)
}

/// Writes segments in RTTM format.
pub fn write_rttm(mut writer: impl Write, segments: &[RttmSegment]) -> Result<(), FeatureError> {
    for s in segments {
        writeln!(
            writer,
            "SPEAKER {} 1 {:.6} {:.6} <NA> <NA> {} <NA> <NA>",
            s.recording, s.onset_s, s.duration_s, s.speaker
        )?;
    }
    Ok(())
}

/// Collects one recording's segments into an annotation.
pub fn annotation_from_segments(
    segments: &[RttmSegment],
    recording: &str,
) -> Result<ActivityAnnotation, FeatureError> {
    let mut by_speaker: BTreeMap<&str, Vec<Interval>> = BTreeMap::new();
    for s in segments.iter().filter(|s| s.recording == recording) {
        by_speaker
            .entry(s.speaker.as_str())
            .or_default()
            .push(Interval::new(s.onset_s, s.onset_s + s.duration_s)?);
    }
    ActivityAnnotation::new(
        by_speaker
            .into_iter()
            .map(|(speaker, mut intervals)| {
                intervals.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
                SpeakerActivity {
                    speaker: speaker.to_string(),
                    intervals,
                }
            })
            .collect(),
    )
}

/// Flattens an annotation back into segments for one recording.
pub fn segments_from_annotation(
    annotation: &ActivityAnnotation,
    recording: &str,
) -> Vec<RttmSegment> {
    let mut out: Vec<RttmSegment> = annotation
        .speakers
        .iter()
        .flat_map(|sa| {
            sa.intervals.iter().map(|iv| RttmSegment {
                recording: recording.to_string(),
                onset_s: iv.onset_s,
                duration_s: iv.length(),
                speaker: sa.speaker.clone(),
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then_with(|| a.speaker.cmp(&b.speaker))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::BufReader;

    #[test]
    fn parses_a_standard_line() {
        let line = "SPEAKER rec 1 0.50 1.25 <NA> <NA> spk1 <NA> <NA>\n";
        let segs = parse_rttm(BufReader::new(line.as_bytes())).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].recording, "rec");
        assert_eq!(segs[0].onset_s, 0.5);
        assert_eq!(segs[0].duration_s, 1.25);
        assert_eq!(segs[0].speaker, "spk1");
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let text = ";; header\n\nSPEAKER rec 1 0.0 1.0 <NA> <NA> a <NA> <NA>\n";
        let segs = parse_rttm(BufReader::new(text.as_bytes())).unwrap();
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn reports_line_numbers_on_malformed_input() {
        let text = "SPEAKER rec 1 0.0 1.0 <NA> <NA> a <NA> <NA>\nSPEAKER rec 1 oops 1.0 <NA> <NA> a <NA> <NA>\n";
        let err = parse_rttm(BufReader::new(text.as_bytes())).unwrap_err();
        match err {
            FeatureError::MalformedRttm { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_wrong_field_count_and_type() {
        let err = parse_rttm(BufReader::new("SPEAKER rec 1 0.0 1.0 <NA> <NA> a\n".as_bytes()))
            .unwrap_err();
        assert!(matches!(err, FeatureError::MalformedRttm { line: 1, .. }));
        let err = parse_rttm(BufReader::new(
            "LEXEME rec 1 0.0 1.0 <NA> <NA> a <NA> <NA>\n".as_bytes(),
        ))
        .unwrap_err();
        assert!(matches!(err, FeatureError::MalformedRttm { line: 1, .. }));
    }

    #[test]
    fn write_then_parse_round_trips() {
        let segs = vec![
            RttmSegment {
                recording: "conv0".into(),
                onset_s: 0.123456,
                duration_s: 2.5,
                speaker: "s1".into(),
            },
            RttmSegment {
                recording: "conv0".into(),
                onset_s: 1.75,
                duration_s: 0.4,
                speaker: "s2".into(),
            },
        ];
        let mut buf = Vec::new();
        write_rttm(&mut buf, &segs).unwrap();
        let back = parse_rttm(BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.len(), segs.len());
        for (a, b) in segs.iter().zip(&back) {
            assert_eq!(a.recording, b.recording);
            assert_eq!(a.speaker, b.speaker);
            assert!((a.onset_s - b.onset_s).abs() < 1e-6);
            assert!((a.duration_s - b.duration_s).abs() < 1e-6);
        }
    }

    #[test]
    fn annotation_round_trip_groups_by_speaker() {
        let segs = vec![
            RttmSegment {
                recording: "r".into(),
                onset_s: 0.0,
                duration_s: 1.0,
                speaker: "b".into(),
            },
            RttmSegment {
                recording: "r".into(),
                onset_s: 2.0,
                duration_s: 1.0,
                speaker: "a".into(),
            },
            RttmSegment {
                recording: "other".into(),
                onset_s: 9.0,
                duration_s: 1.0,
                speaker: "zz".into(),
            },
        ];
        let ann = annotation_from_segments(&segs, "r").unwrap();
        assert_eq!(ann.speaker_ids(), vec!["a", "b"]);
        let back = segments_from_annotation(&ann, "r");
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].speaker, "b");
        assert_eq!(back[1].speaker, "a");
    }
}
