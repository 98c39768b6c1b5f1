//! Self-describing model checkpoints.
//!
//! A checkpoint is one JSON document holding the format version, the seed
//! the model was built from, a config echo, every named parameter tensor,
//! and per-layer batch-norm running statistics. Maps are ordered, so the
//! same model always serializes to the same bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{build_model, EncoderError, Model, ModelConfig};
use crate::layers::RunningStats;
use crate::tensor::Tensor;
use crate::FORMAT_VERSION;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct NormRecord {
    eps: f64,
    momentum: f64,
    running: Option<RunningStatsRecord>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunningStatsRecord {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    params: BTreeMap<String, TensorRecord>,
    norms: BTreeMap<String, NormRecord>,
}

/// Serializes the model to checkpoint bytes. Non-finite parameters are
/// refused — a checkpoint must always be loadable into a working model.
pub fn checkpoint_bytes(model: &Model, seed: u64) -> Result<Vec<u8>, EncoderError> {
    let mut params = BTreeMap::new();
    let mut bad: Option<String> = None;
    model.visit_params(&mut |name, t| {
        if !t.all_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
        params.insert(
            name.to_string(),
            TensorRecord {
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            },
        );
    });
    if let Some(name) = bad {
        return Err(EncoderError::Checkpoint {
            what: format!("parameter {name} is not finite"),
        });
    }
    let mut norms = BTreeMap::new();
    model.visit_bn(&mut |name, p| {
        norms.insert(
            name.to_string(),
            NormRecord {
                eps: p.eps,
                momentum: p.momentum,
                running: p.running.as_ref().map(|r| RunningStatsRecord {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                }),
            },
        );
    });
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        seed,
        config: model.config.clone(),
        params,
        norms,
    };
    Ok(serde_json::to_vec(&file)?)
}

/// Writes a checkpoint file.
pub fn save_checkpoint(model: &Model, seed: u64, path: &Path) -> Result<(), EncoderError> {
    let bytes = checkpoint_bytes(model, seed)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Restores a model (and its build seed) from checkpoint bytes or a file.
/// Refuses other format versions and any shape or name drift.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<(Model, u64), EncoderError> {
    let file: CheckpointFile = serde_json::from_slice(bytes)?;
    if file.format_version != FORMAT_VERSION {
        return Err(EncoderError::Checkpoint {
            what: format!(
                "format version {} is not supported (expected {})",
                file.format_version, FORMAT_VERSION
            ),
        });
    }
    let mut model = build_model(&file.config, file.seed)?;
    let mut err: Option<String> = None;
    let mut used = 0;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match file.params.get(name) {
            Some(rec) if rec.shape == t.shape() => {
                match Tensor::from_vec(rec.shape.clone(), rec.data.clone()) {
                    Ok(nt) => *t = nt,
                    Err(e) => err = Some(format!("{name}: {e}")),
                }
                used += 1;
            }
            Some(rec) => {
                err = Some(format!(
                    "{name}: shape {:?} in file, model wants {:?}",
                    rec.shape,
                    t.shape()
                ))
            }
            None => err = Some(format!("missing parameter {name}")),
        }
    });
    if let Some(what) = err {
        return Err(EncoderError::Checkpoint { what });
    }
    if used != file.params.len() {
        return Err(EncoderError::Checkpoint {
            what: format!("{} unused parameters in file", file.params.len() - used),
        });
    }
    let mut err: Option<String> = None;
    model.visit_bn_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match file.norms.get(name) {
            Some(rec) => {
                p.eps = rec.eps;
                p.momentum = rec.momentum;
                p.running = rec.running.as_ref().map(|r| RunningStats {
                    mean: r.mean.clone(),
                    var: r.var.clone(),
                });
            }
            None => err = Some(format!("missing normalization state {name}")),
        }
    });
    if let Some(what) = err {
        return Err(EncoderError::Checkpoint { what });
    }
    Ok((model, file.seed))
}

/// Reads a checkpoint file; see [`load_checkpoint_bytes`].
pub fn load_checkpoint(path: &Path) -> Result<(Model, u64), EncoderError> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{extract_embedding, Family, ModelConfig};
    use super::*;
    use crate::features::FeatureSequence;
    use crate::rng::Prng;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            family: Family::CamppMini,
            input_features: 4,
            channels: 8,
            num_blocks: 2,
            embedding_dim: 6,
            attention_channels: 5,
            segment_len: 4,
            guide_input: true,
            guide_pooling: true,
            ..ModelConfig::default()
        };
        build_model(&cfg, 99).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything_bitwise() {
        let mut model = small_model();
        // Make the state non-trivial: perturb a parameter and the stats.
        let mut rng = Prng::seed(1);
        model.visit_params_mut(&mut |_, t| {
            let data: Vec<f64> = t.data().iter().map(|v| v + 0.01 * rng.gaussian()).collect();
            *t = Tensor::from_vec(t.shape().to_vec(), data).unwrap();
        });
        model.visit_bn_mut(&mut |_, p| {
            let c = p.gamma.numel();
            p.absorb_batch_stats(&rng.gaussian_vec(c, 1.0), &vec![0.5; c]);
        });
        let bytes = checkpoint_bytes(&model, 99).unwrap();
        let (back, seed) = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(seed, 99);
        let mut originals = Vec::new();
        model.visit_params(&mut |_, t| originals.push(t.data().to_vec()));
        back.visit_params(&mut |_, t| {
            assert_eq!(t.data(), originals.remove(0).as_slice());
        });
        let mut stats = Vec::new();
        model.visit_bn(&mut |_, p| stats.push(p.running.clone()));
        back.visit_bn(&mut |_, p| assert_eq!(p.running, stats.remove(0)));
        // Same bytes again: serialization is deterministic.
        assert_eq!(bytes, checkpoint_bytes(&back, seed).unwrap());
    }

    #[test]
    fn restored_model_reproduces_embeddings() {
        let model = small_model();
        let mut rng = Prng::seed(2);
        let feats = FeatureSequence {
            frames: Tensor::from_vec(vec![4, 15], rng.gaussian_vec(60, 1.0)).unwrap(),
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        };
        let mask = crate::features::ActivityMask {
            q_target: (0..15).map(|t| t % 2 == 0).collect(),
            q_nontarget: (0..15).map(|t| t % 3 == 0).collect(),
        };
        let e1 = extract_embedding(&model, &feats, Some(&mask)).unwrap();
        let bytes = checkpoint_bytes(&model, 99).unwrap();
        let (back, _) = load_checkpoint_bytes(&bytes).unwrap();
        let e2 = extract_embedding(&back, &feats, Some(&mask)).unwrap();
        assert_eq!(e1.vector, e2.vector);
    }

    #[test]
    fn version_mismatch_is_refused() {
        let model = small_model();
        let bytes = checkpoint_bytes(&model, 99).unwrap();
        let mut doc: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        doc["format_version"] = serde_json::json!(9999);
        let tampered = serde_json::to_vec(&doc).unwrap();
        let err = load_checkpoint_bytes(&tampered).unwrap_err();
        assert!(matches!(err, EncoderError::Checkpoint { .. }));
    }

    #[test]
    fn missing_parameter_is_refused() {
        let model = small_model();
        let bytes = checkpoint_bytes(&model, 99).unwrap();
        let mut doc: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        doc["params"]
            .as_object_mut()
            .unwrap()
            .remove("head.w")
            .unwrap();
        let tampered = serde_json::to_vec(&doc).unwrap();
        assert!(load_checkpoint_bytes(&tampered).is_err());
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        save_checkpoint(&model, 99, &path).unwrap();
        let (back, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 99);
        assert_eq!(back.config, model.config);
    }
}
