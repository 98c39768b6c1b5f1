//! Margin-softmax speaker classification, cyclical learning rates, Adam,
//! and the desk-scale training loop.
//!
//! Guided configurations train on three-speaker mixtures where each mixture
//! contributes one example per constituent speaker (the target rotates);
//! baselines train on clean single-speaker clips of the same speakers. Both
//! paths are bit-deterministic given the seed.

use crate::encoder::{
    build_model, forward_train, EncoderError, MaskBatch, Model, ModelConfig,
};
use crate::features::ActivityMask;
use crate::layers::init_uniform;
use crate::rng::Prng;
use crate::synth::{synth_speaker_bank, synth_training_mixture, SynthConfig, SynthError};
use crate::tensor::{ops, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Errors from loss computation, optimization, or the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameter: {what}")]
    InvalidHyper { what: String },
    #[error("non-finite embedding entering the loss")]
    NonFiniteEmbedding,
    #[error("optimizer shape mismatch: {what}")]
    ShapeMismatch { what: String },
    #[error("training diverged at step {step}; last good checkpoint: {last_good}")]
    Diverged { step: usize, last_good: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Additive-angular-margin classification head over speaker classes.
///
/// Class weights are L2-normalized at scoring time, so the stored tensor is
/// unconstrained and trainable.
#[derive(Debug, Clone)]
pub struct AAMHead {
    /// `[n_speakers, embedding_dim]` class weight rows.
    pub weights: Tensor,
    /// Additive angular margin in radians; `[0, pi/2)`.
    pub margin: f64,
    /// Logit scale; positive.
    pub scale: f64,
}

impl AAMHead {
    pub fn new(
        n_speakers: usize,
        embedding_dim: usize,
        margin: f64,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self, TrainError> {
        if n_speakers < 2 || embedding_dim == 0 {
            return Err(TrainError::InvalidHyper {
                what: format!("head needs >=2 classes and a nonzero embedding dim, got {n_speakers}x{embedding_dim}"),
            });
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(TrainError::InvalidHyper {
                what: format!("margin {margin} outside [0, pi/2)"),
            });
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(TrainError::InvalidHyper {
                what: format!("scale {scale} must be positive"),
            });
        }
        Ok(Self {
            weights: init_uniform(rng, vec![n_speakers, embedding_dim], embedding_dim),
            margin,
            scale,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Copy whose weights are leaves on `tape`, for gradient collection.
    pub fn tracked(&self, tape: &mut Tape) -> AAMHead {
        AAMHead {
            weights: tape.leaf(&self.weights),
            margin: self.margin,
            scale: self.scale,
        }
    }
}

/// Mean additive-angular-margin softmax loss over a batch.
///
/// Logits are scaled cosines between normalized embeddings and normalized
/// class weights; the target entry gets `cos(theta + margin)`.
pub fn aam_softmax_loss(
    tape: &mut Tape,
    embeddings: &Tensor,
    labels: &[usize],
    head: &AAMHead,
) -> Result<Tensor, TrainError> {
    if !embeddings.all_finite() {
        return Err(TrainError::NonFiniteEmbedding);
    }
    let e = ops::l2_normalize_rows(tape, embeddings)?;
    let w = ops::l2_normalize_rows(tape, &head.weights)?;
    let cos = ops::matmul_nt(tape, &e, &w)?;
    let adjusted = ops::margin_adjust(tape, &cos, labels, head.margin)?;
    let logits = ops::scale(tape, &adjusted, head.scale);
    Ok(ops::cross_entropy_mean(tape, &logits, labels)?)
}

/// Fraction of rows whose nearest class weight (by cosine) is the label.
pub fn classification_accuracy(embeddings: &Tensor, labels: &[usize], head: &AAMHead) -> f64 {
    let (b_n, e_n) = (embeddings.shape()[0], embeddings.shape()[1]);
    let s_n = head.n_speakers();
    let ed = embeddings.data();
    let wd = head.weights.data();
    let mut w_norm = vec![0.0; s_n];
    for (s, slot) in w_norm.iter_mut().enumerate() {
        *slot = wd[s * e_n..(s + 1) * e_n]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
    }
    let mut hits = 0usize;
    for b in 0..b_n {
        let row = &ed[b * e_n..(b + 1) * e_n];
        let (mut best, mut best_cos) = (0usize, f64::NEG_INFINITY);
        for s in 0..s_n {
            let dot: f64 = row
                .iter()
                .zip(&wd[s * e_n..(s + 1) * e_n])
                .map(|(a, b)| a * b)
                .sum();
            let c = dot / w_norm[s].max(1e-300);
            if c > best_cos {
                best_cos = c;
                best = s;
            }
        }
        if best == labels[b] {
            hits += 1;
        }
    }
    hits as f64 / b_n.max(1) as f64
}

/// Cyclical learning-rate schedule: linear warmup then cosine decay,
/// restarting every cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LRSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Epochs per cycle; the schedule restarts at cycle boundaries.
    pub cycle_epochs: usize,
    /// Iterations of linear warmup at the start of each cycle.
    pub warmup_iters: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            max_lr: 1e-3,
            cycle_epochs: 5,
            warmup_iters: 8,
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0)
            || !(self.max_lr.is_finite() && self.max_lr >= self.base_lr)
        {
            return Err(TrainError::InvalidHyper {
                what: format!(
                    "learning rates must satisfy 0 < base <= max, got {} and {}",
                    self.base_lr, self.max_lr
                ),
            });
        }
        if self.cycle_epochs == 0 {
            return Err(TrainError::InvalidHyper {
                what: "cycle_epochs must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Learning rate at a global iteration: warmup from base to max over
/// `warmup_iters`, cosine decay back to base over the rest of the cycle.
pub fn cyclical_lr(iteration: usize, iters_per_epoch: usize, sched: &LRSchedule) -> f64 {
    let cycle_len = (sched.cycle_epochs * iters_per_epoch.max(1)).max(1);
    let i = iteration % cycle_len;
    let warmup = sched.warmup_iters.min(cycle_len);
    let span = sched.max_lr - sched.base_lr;
    if i < warmup {
        sched.base_lr + span * i as f64 / warmup as f64
    } else if cycle_len == warmup {
        sched.base_lr
    } else {
        let t = (i - warmup) as f64 / (cycle_len - warmup) as f64;
        sched.base_lr + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// What a single optimizer call did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient contained a non-finite value; parameters and state untouched.
    SkippedNonFinite,
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    hp: &AdamParams,
) -> Result<StepOutcome, TrainError> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(TrainError::ShapeMismatch {
            what: format!(
                "param {} / grad {} / state {}",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for i in 0..param.len() {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grad[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(StepOutcome::Applied)
}

/// Training-loop shape and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_speakers: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Mixtures per batch; each mixture yields three examples.
    pub batch_mixtures: usize,
    /// Fixed training clip length in frames.
    pub span_frames: usize,
    pub margin: f64,
    pub scale: f64,
    pub lr: LRSchedule,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_speakers: 64,
            epochs: 10,
            batches_per_epoch: 8,
            batch_mixtures: 16,
            span_frames: 300,
            margin: 0.2,
            scale: 30.0,
            lr: LRSchedule::default(),
            adam: AdamParams::default(),
        }
    }
}

/// One metrics-log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// L2 norm over all gradients; absent when the step was skipped.
    pub grad_norm: Option<f64>,
}

/// Outcome of a completed training run.
#[derive(Debug)]
pub struct TrainReport {
    pub model: Model,
    pub head: AAMHead,
    pub metrics: Vec<StepMetrics>,
    /// Mean batch accuracy over the final epoch.
    pub final_train_accuracy: f64,
    /// Path of the final checkpoint.
    pub checkpoint: PathBuf,
}

/// Seed streams, so data, model, and head draws never interleave.
const HEAD_STREAM: u64 = 0x4EAD;
const DATA_STREAM: u64 = 0xDA7A;

/// Runs the training loop, writing `metrics.log` and per-cycle checkpoints
/// under `out_dir`.
///
/// Divergence (non-finite loss or embeddings) aborts with the last
/// end-of-epoch checkpoint saved as `checkpoints/last-good.json`.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    synth_cfg: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    cfg.lr.validate()?;
    if cfg.epochs == 0 || cfg.batches_per_epoch == 0 || cfg.batch_mixtures == 0 {
        return Err(TrainError::InvalidHyper {
            what: "epochs, batches_per_epoch and batch_mixtures must be positive".into(),
        });
    }
    if cfg.n_speakers < 4 {
        return Err(TrainError::InvalidHyper {
            what: format!("need >=4 speakers to form mixtures, got {}", cfg.n_speakers),
        });
    }
    if cfg.span_frames < 2 {
        return Err(TrainError::InvalidHyper {
            what: format!("span_frames {} too short", cfg.span_frames),
        });
    }

    let bank = synth_speaker_bank(seed, cfg.n_speakers, synth_cfg)?;
    let mut model = build_model(model_cfg, seed)?;
    let mut head = AAMHead::new(
        cfg.n_speakers,
        model_cfg.embedding_dim,
        cfg.margin,
        cfg.scale,
        &mut Prng::derive(seed, HEAD_STREAM),
    )?;
    let guided = model_cfg.any_guide();

    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(
        out_dir.join("metrics.log"),
    )?);

    let mut param_count = 0usize;
    model.visit_params(&mut |_, _| param_count += 1);
    let mut model_states: Vec<AdamState> = {
        let mut sizes = Vec::with_capacity(param_count);
        model.visit_params(&mut |_, t| sizes.push(t.numel()));
        sizes.into_iter().map(AdamState::zeros).collect()
    };
    let mut head_state = AdamState::zeros(head.weights.numel());

    let mut data_rng = Prng::derive(seed, DATA_STREAM);
    let mut metrics: Vec<StepMetrics> = Vec::new();
    let mut last_good = crate::encoder::checkpoint::checkpoint_bytes(&model, seed)?;
    let mut step = 0usize;
    let mut final_epoch_accuracy = 0.0;

    let f_n = model.config.input_features;
    for epoch in 0..cfg.epochs {
        let mut epoch_accuracy = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            // ---- assemble one batch -------------------------------------
            let mut columns: Vec<f64> = Vec::new();
            let mut masks: Vec<ActivityMask> = Vec::new();
            let mut labels: Vec<usize> = Vec::new();
            for _ in 0..cfg.batch_mixtures {
                let trio = data_rng.pick_distinct(cfg.n_speakers, 3);
                if guided {
                    let refs: Vec<&_> = trio.iter().map(|&k| &bank[k]).collect();
                    let mix =
                        synth_training_mixture(&refs, cfg.span_frames, synth_cfg, &mut data_rng)?;
                    for &spk in &trio {
                        columns.extend_from_slice(mix.features.frames.data());
                        masks.push(mix.masks_for(&bank[spk].id)?);
                        labels.push(spk);
                    }
                } else {
                    for &spk in &trio {
                        let clip = synth_training_mixture(
                            &[&bank[spk]],
                            cfg.span_frames,
                            synth_cfg,
                            &mut data_rng,
                        )?;
                        columns.extend_from_slice(clip.features.frames.data());
                        labels.push(spk);
                    }
                }
            }
            let b_n = labels.len();
            let x = Tensor::from_vec(vec![b_n, f_n, cfg.span_frames], columns)?;
            let mask_batch = guided.then(|| MaskBatch::from_masks(&masks));

            // ---- forward, loss, backward --------------------------------
            let lr = cyclical_lr(step, cfg.batches_per_epoch, &cfg.lr);
            let mut tape = Tape::new();
            let tracked_model = model.tracked(&mut tape);
            let tracked_head = head.tracked(&mut tape);
            let mut bn_updates = Vec::new();
            let diverged = |step: usize,
                            last_good: &[u8],
                            metrics_file: &mut std::io::BufWriter<std::fs::File>|
             -> Result<TrainError, TrainError> {
                let path = ckpt_dir.join("last-good.json");
                std::fs::write(&path, last_good)?;
                metrics_file.flush()?;
                Ok(TrainError::Diverged {
                    step,
                    last_good: path.display().to_string(),
                })
            };
            let embeddings = forward_train(
                &tracked_model,
                &mut tape,
                &x,
                mask_batch.as_ref(),
                &mut bn_updates,
            )?;
            let loss = match aam_softmax_loss(&mut tape, &embeddings, &labels, &tracked_head) {
                Err(TrainError::NonFiniteEmbedding) => {
                    return Err(diverged(step, &last_good, &mut metrics_file)?);
                }
                other => other?,
            };
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(diverged(step, &last_good, &mut metrics_file)?);
            }
            tape.backward(&loss)?;

            // ---- gradients, in parameter-visit order ---------------------
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(param_count + 1);
            let mut collect_err = None;
            tracked_model.visit_params(&mut |name, t| {
                match tape.grad_of(t) {
                    Ok(Some(g)) => grads.push(g.to_vec()),
                    Ok(None) => grads.push(vec![0.0; t.numel()]),
                    Err(e) => collect_err = Some((name.to_string(), e)),
                }
            });
            if let Some((name, e)) = collect_err {
                return Err(TrainError::ShapeMismatch {
                    what: format!("gradient of {name}: {e}"),
                });
            }
            let head_grad = match tape.grad_of(&tracked_head.weights)? {
                Some(g) => g.to_vec(),
                None => vec![0.0; head.weights.numel()],
            };
            let norm_sq: f64 = grads
                .iter()
                .chain(std::iter::once(&head_grad))
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum();
            let grad_norm = norm_sq.sqrt();

            // ---- update ---------------------------------------------------
            let mut applied = true;
            if grad_norm.is_finite() {
                let mut idx = 0usize;
                let mut update_err = None;
                model.visit_params_mut(&mut |name, t| {
                    let mut data = t.data().to_vec();
                    match adam_step(&mut data, &grads[idx], &mut model_states[idx], lr, &cfg.adam)
                    {
                        Ok(_) => match Tensor::from_vec(t.shape().to_vec(), data) {
                            Ok(nt) => *t = nt,
                            Err(e) => update_err = Some(format!("{name}: {e}")),
                        },
                        Err(e) => update_err = Some(format!("{name}: {e}")),
                    }
                    idx += 1;
                });
                if let Some(what) = update_err {
                    return Err(TrainError::ShapeMismatch { what });
                }
                let mut head_data = head.weights.data().to_vec();
                adam_step(&mut head_data, &head_grad, &mut head_state, lr, &cfg.adam)?;
                head.weights = Tensor::from_vec(head.weights.shape().to_vec(), head_data)?;
                model.absorb_bn_updates(&bn_updates)?;
            } else {
                applied = false;
            }

            epoch_accuracy +=
                classification_accuracy(&embeddings, &labels, &head) / cfg.batches_per_epoch as f64;

            let line = StepMetrics {
                step,
                epoch,
                lr,
                loss: loss_value,
                grad_norm: applied.then_some(grad_norm),
            };
            serde_json::to_writer(&mut metrics_file, &line)?;
            metrics_file.write_all(b"\n")?;
            metrics.push(line);
            step += 1;
        }
        metrics_file.flush()?;
        final_epoch_accuracy = epoch_accuracy;
        last_good = crate::encoder::checkpoint::checkpoint_bytes(&model, seed)?;
        if (epoch + 1) % cfg.lr.cycle_epochs == 0 {
            let n = (epoch + 1) / cfg.lr.cycle_epochs;
            std::fs::write(ckpt_dir.join(format!("cycle{n:03}.json")), &last_good)?;
        }
    }

    let final_path = ckpt_dir.join("final.json");
    std::fs::write(&final_path, &last_good)?;
    metrics_file.flush()?;
    Ok(TrainReport {
        model,
        head,
        metrics,
        final_train_accuracy: final_epoch_accuracy,
        checkpoint: final_path,
    })
}
