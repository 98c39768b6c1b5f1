//! Dataset export: binary feature files, RTTM, and line-delimited manifests.

use super::{Mixture, OverlapBucket, SynthError};
use crate::features::rttm::{
    annotation_from_segments, parse_rttm, segments_from_annotation, write_rttm,
};
use crate::features::FeatureSequence;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// One dataset entry, with paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub features: String,
    pub rttm: String,
    pub target: String,
    pub bucket: OverlapBucket,
}

/// Writes one JSON record per line.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a line-delimited manifest, skipping blank lines.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

const FEATURE_MAGIC: &[u8; 4] = b"MEF1";

/// Writes a feature matrix as little-endian binary with a fixed header.
pub fn write_feature_file(path: &Path, features: &FeatureSequence) -> Result<(), SynthError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(features.num_features() as u32).to_le_bytes())?;
    w.write_all(&(features.num_frames() as u32).to_le_bytes())?;
    w.write_all(&features.frame_shift_s.to_le_bytes())?;
    w.write_all(&features.frame_length_s.to_le_bytes())?;
    for v in features.frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file written by [`write_feature_file`], bit-exactly.
pub fn read_feature_file(path: &Path) -> Result<FeatureSequence, SynthError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(SynthError::Invalid {
            what: format!("{}: not a feature file", path.display()),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let f_n = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let t_n = u32::from_le_bytes(u32buf) as usize;
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf)?;
    let frame_shift_s = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let frame_length_s = f64::from_le_bytes(f64buf);
    let mut data = Vec::with_capacity(f_n * t_n);
    for _ in 0..f_n * t_n {
        r.read_exact(&mut f64buf)?;
        data.push(f64::from_le_bytes(f64buf));
    }
    Ok(FeatureSequence {
        frames: Tensor::from_vec(vec![f_n, t_n], data)?,
        frame_shift_s,
        frame_length_s,
    })
}

/// Writes a mixture set under `dir` (`features/`, `rttm/`) and returns the
/// manifest records describing it.
pub fn export_mixtures(dir: &Path, mixtures: &[Mixture]) -> Result<Vec<ManifestRecord>, SynthError> {
    std::fs::create_dir_all(dir.join("features"))?;
    std::fs::create_dir_all(dir.join("rttm"))?;
    let mut records = Vec::with_capacity(mixtures.len());
    for (i, mix) in mixtures.iter().enumerate() {
        let stem = format!("mix{i:05}");
        let feat_rel = format!("features/{stem}.feat");
        let rttm_rel = format!("rttm/{stem}.rttm");
        write_feature_file(&dir.join(&feat_rel), &mix.features)?;
        let segments = segments_from_annotation(&mix.annotation, &stem);
        let mut w = BufWriter::new(std::fs::File::create(dir.join(&rttm_rel))?);
        write_rttm(&mut w, &segments)?;
        w.flush()?;
        records.push(ManifestRecord {
            features: feat_rel,
            rttm: rttm_rel,
            target: mix.target_id.clone(),
            bucket: OverlapBucket::of_ratio(mix.overlap_ratio),
        });
    }
    Ok(records)
}

/// Loads one exported mixture back from its manifest record.
pub fn load_mixture(dir: &Path, record: &ManifestRecord) -> Result<Mixture, SynthError> {
    let features = read_feature_file(&dir.join(&record.features))?;
    let file = std::fs::File::open(dir.join(&record.rttm))?;
    let segments = parse_rttm(BufReader::new(file))?;
    let recording = segments
        .first()
        .map(|s| s.recording.clone())
        .ok_or_else(|| SynthError::Invalid {
            what: format!("{}: empty RTTM", record.rttm),
        })?;
    let annotation = annotation_from_segments(&segments, &recording)?;
    let overlap_ratio = annotation.overlap_ratio(&record.target)?;
    Ok(Mixture {
        features,
        annotation,
        target_id: record.target.clone(),
        overlap_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{synth_mixture, synth_speaker_bank, SynthConfig};
    use super::*;
    use crate::rng::Prng;

    fn sample_mixtures(n: usize) -> Vec<Mixture> {
        let cfg = SynthConfig::default();
        let bank = synth_speaker_bank(12, 4, &cfg).expect("bank");
        let mut rng = Prng::seed(30);
        (0..n)
            .map(|i| {
                let refs: Vec<_> = [0, (i % 3) + 1].iter().map(|&k| &bank[k]).collect();
                synth_mixture(
                    &refs,
                    &[2.5, 2.0],
                    OverlapBucket::UpTo25,
                    &cfg,
                    &mut rng,
                )
                .expect("mixture")
            })
            .collect()
    }

    #[test]
    fn feature_files_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().expect("tempdir");
        let mix = sample_mixtures(1).remove(0);
        let path = dir.path().join("a.feat");
        write_feature_file(&path, &mix.features).expect("write");
        let back = read_feature_file(&path).expect("read");
        assert_eq!(back.frames.data(), mix.features.frames.data());
        assert_eq!(back.frame_shift_s, mix.features.frame_shift_s);
        assert_eq!(back.frame_length_s, mix.features.frame_length_s);
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, b"NOPE").expect("write");
        assert!(read_feature_file(&path).is_err());
        std::fs::write(&path, b"MEF1\x01").expect("write");
        assert!(read_feature_file(&path).is_err());
    }

    #[test]
    fn exported_mixtures_reload_with_identical_masks() {
        let dir = tempfile::tempdir().expect("tempdir");
        let mixtures = sample_mixtures(3);
        let records = export_mixtures(dir.path(), &mixtures).expect("export");
        assert_eq!(records.len(), 3);
        write_manifest(&dir.path().join("manifest.jsonl"), &records).expect("manifest");
        let read = read_manifest(&dir.path().join("manifest.jsonl")).expect("read");
        assert_eq!(read, records);
        for (rec, orig) in read.iter().zip(&mixtures) {
            let back = load_mixture(dir.path(), rec).expect("load");
            assert_eq!(back.features.frames.data(), orig.features.frames.data());
            assert_eq!(back.target_id, orig.target_id);
            let a = back.masks().expect("masks");
            let b = orig.masks().expect("masks");
            assert_eq!(a.q_target, b.q_target);
            assert_eq!(a.q_nontarget, b.q_nontarget);
            assert!((back.overlap_ratio - orig.overlap_ratio).abs() < 1e-9);
            assert!(rec.bucket.contains(back.overlap_ratio));
        }
    }

    #[test]
    fn manifest_lines_carry_bucket_labels() {
        let dir = tempfile::tempdir().expect("tempdir");
        let mixtures = sample_mixtures(1);
        let records = export_mixtures(dir.path(), &mixtures).expect("export");
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &records).expect("manifest");
        let text = std::fs::read_to_string(&path).expect("read");
        assert!(text.contains("\"bucket\":\"(0,25)\""));
        assert!(text.contains("features/mix00000.feat"));
    }
}
