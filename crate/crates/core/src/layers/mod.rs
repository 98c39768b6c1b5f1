//! Neural building blocks with target-masked variants.
//!
//! Every operation takes a [`Select`] describing which frames count toward
//! its statistics: `All` is the standard unguided form, `Rows` restricts
//! statistics to selected (target-active) frames. Outputs still cover every
//! frame — only the *statistics* are masked. An all-true selection is
//! bitwise-identical to `All` because both visit frames in the same order.

use crate::rng::Prng;
use crate::tensor::{ops, Select, Tape, Tensor, TensorError};

/// Uniform init over `(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub fn init_uniform(rng: &mut Prng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.range_f64(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches element count")
}

/// Per-channel mean and population variance over the selected frames.
///
/// Input `[B, C, T]`, outputs `[B, C]` each. A sample with no selected
/// frames is an error.
pub fn masked_moments(
    tape: &mut Tape,
    x: &Tensor,
    sel: Select,
) -> Result<(Tensor, Tensor), TensorError> {
    let mean = ops::masked_mean_time(tape, x, sel)?;
    let xx = ops::mul(tape, x, x)?;
    let mean_sq = ops::masked_mean_time(tape, &xx, sel)?;
    let mm = ops::mul(tape, &mean, &mean)?;
    let var = ops::sub(tape, &mean_sq, &mm)?;
    Ok((mean, var))
}

/// Two stacked linear layers with a sigmoid gate, shared by the SE block
/// and the context gate.
#[derive(Debug, Clone)]
pub struct SEParams {
    /// Reducing layer weight, `[C/r, C]`.
    pub w3: Tensor,
    pub b3: Tensor,
    /// Expanding layer weight, `[C, C/r]`.
    pub w4: Tensor,
    pub b4: Tensor,
}

impl SEParams {
    pub fn init(channels: usize, reduction: usize, rng: &mut Prng) -> Result<Self, TensorError> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(TensorError::Invalid {
                op: "se_params",
                what: format!("reduction {reduction} must divide channels {channels}"),
            });
        }
        let hidden = channels / reduction;
        Ok(Self {
            w3: init_uniform(rng, vec![hidden, channels], channels),
            b3: Tensor::zeros(vec![hidden]),
            w4: init_uniform(rng, vec![channels, hidden], hidden),
            b4: Tensor::zeros(vec![channels]),
        })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self, TensorError> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(TensorError::Invalid {
                op: "se_params",
                what: format!("reduction {reduction} must divide channels {channels}"),
            });
        }
        let hidden = channels / reduction;
        Ok(Self {
            w3: Tensor::zeros(vec![hidden, channels]),
            b3: Tensor::zeros(vec![hidden]),
            w4: Tensor::zeros(vec![channels, hidden]),
            b4: Tensor::zeros(vec![channels]),
        })
    }
}

/// `sigmoid(W4 relu(W3 z + b3) + b4)` over row vectors `z [B, C]`.
fn se_gate(tape: &mut Tape, z: &Tensor, p: &SEParams) -> Result<Tensor, TensorError> {
    let h = ops::affine_rows(tape, z, &p.w3, &p.b3)?;
    let h = ops::relu(tape, &h);
    let e = ops::affine_rows(tape, &h, &p.w4, &p.b4)?;
    Ok(ops::sigmoid(tape, &e))
}

/// Result of [`se_block_forward`]: the rescaled frames plus the gate itself.
pub struct SeOutput {
    /// `x` with each channel multiplied by its gate, `[B, C, T]`.
    pub scaled: Tensor,
    /// Per-channel gate `s ∈ (0,1)`, `[B, C]`.
    pub gate: Tensor,
}

/// Squeeze-excitation: per-channel gates from a pooled context.
///
/// The context mean is taken over the selected frames only; the gate then
/// rescales *every* frame. With `Select::All` this is the standard block.
pub fn se_block_forward(
    tape: &mut Tape,
    x: &Tensor,
    p: &SEParams,
    sel: Select,
) -> Result<SeOutput, TensorError> {
    let z = ops::masked_mean_time(tape, x, sel)?;
    let gate = se_gate(tape, &z, p)?;
    let scaled = ops::channel_scale(tape, x, &gate)?;
    Ok(SeOutput { scaled, gate })
}

/// Time-axis segmentation: strictly increasing boundaries from 0 to T.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub boundaries: Vec<usize>,
}

impl SegmentPlan {
    /// Segments of `seg_len` frames; the last one keeps the remainder.
    pub fn fixed(seg_len: usize, num_frames: usize) -> Result<Self, TensorError> {
        if seg_len == 0 || num_frames == 0 {
            return Err(TensorError::Invalid {
                op: "segment_plan",
                what: "segment length and frame count must be positive".into(),
            });
        }
        let mut boundaries: Vec<usize> = (0..).map(|k| k * seg_len).take_while(|&b| b < num_frames).collect();
        boundaries.push(num_frames);
        Ok(Self { boundaries })
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn num_frames(&self) -> usize {
        *self.boundaries.last().expect("non-empty boundaries")
    }
}

/// Result of [`campp_mask_forward`].
pub struct CamOutput {
    /// Transformed frames scaled segment-wise, `[B, C, T]`.
    pub scaled: Tensor,
    /// One gate per segment, each `[B, C]`.
    pub gates: Vec<Tensor>,
    /// The pooled global context `z [B, C]` (masked when guided).
    pub global_context: Tensor,
}

/// Context-aware gating: transforms `x` with `g`, then rescales each time
/// segment by a gate computed from global plus per-segment context.
///
/// The global context `z` honors the selection; the per-segment contexts
/// `z_k` always average *all* frames of their segment, so local acoustics
/// stay visible even where the target is silent.
pub fn campp_mask_forward(
    tape: &mut Tape,
    x: &Tensor,
    p: &SEParams,
    g: impl FnOnce(&mut Tape, &Tensor) -> Result<Tensor, TensorError>,
    plan: &SegmentPlan,
    sel: Select,
) -> Result<CamOutput, TensorError> {
    let (b_n, _, t_n) = match x.shape() {
        [b, c, t] => (*b, *c, *t),
        s => {
            return Err(TensorError::RankMismatch {
                op: "campp_mask_forward",
                expected: 3,
                got: s.to_vec(),
            })
        }
    };
    if plan.num_frames() != t_n {
        return Err(TensorError::Invalid {
            op: "campp_mask_forward",
            what: format!(
                "segment plan covers {} frames, input has {}",
                plan.num_frames(),
                t_n
            ),
        });
    }
    let gx = g(tape, x)?;
    let global = ops::masked_mean_time(tape, x, sel)?;
    let mut gates = Vec::with_capacity(plan.num_segments());
    for k in 0..plan.num_segments() {
        let (lo, hi) = (plan.boundaries[k], plan.boundaries[k + 1]);
        let mut row = vec![false; t_n];
        row[lo..hi].fill(true);
        let seg_rows = vec![row; b_n];
        let local = ops::masked_mean_time(tape, x, Select::Rows(&seg_rows))?;
        let ctx = ops::add(tape, &global, &local)?;
        gates.push(se_gate(tape, &ctx, p)?);
    }
    let scaled = ops::segment_scale(tape, &gx, &gates, &plan.boundaries)?;
    Ok(CamOutput {
        scaled,
        gates,
        global_context: global,
    })
}

/// Batch normalization parameters plus running statistics.
///
/// Running statistics start out absent; inference requires them, so either
/// train first or initialize them explicitly (mean 0, variance 1).
#[derive(Debug, Clone)]
pub struct BNParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub running: Option<RunningStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BNParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            eps: 1e-5,
            momentum: 0.1,
            running: None,
        }
    }

    /// Sets running statistics to mean 0, variance 1.
    pub fn with_unit_running(mut self) -> Self {
        let c = self.gamma.numel();
        self.running = Some(RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        self
    }

    /// Blends one batch's statistics into the running statistics with
    /// `momentum`; the first batch initializes them outright.
    pub fn absorb_batch_stats(&mut self, mean: &[f64], var: &[f64]) {
        match &mut self.running {
            Some(r) => {
                for d in 0..mean.len() {
                    r.mean[d] = (1.0 - self.momentum) * r.mean[d] + self.momentum * mean[d];
                    r.var[d] = (1.0 - self.momentum) * r.var[d] + self.momentum * var[d];
                }
            }
            None => {
                self.running = Some(RunningStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                })
            }
        }
    }
}

/// Train-mode batch norm: statistics over the selected frames of the whole
/// batch (denominator = total selected count), applied to every frame.
/// Running statistics are updated in place with `momentum`.
pub fn batchnorm_forward_train(
    tape: &mut Tape,
    x: &Tensor,
    p: &mut BNParams,
    sel: Select,
) -> Result<Tensor, TensorError> {
    let (y, mean, var) = ops::batchnorm_train(tape, x, &p.gamma, &p.beta, sel, p.eps)?;
    p.absorb_batch_stats(&mean, &var);
    Ok(y)
}

/// Inference-mode batch norm: normalizes with the stored running statistics,
/// ignoring any frame selection by design.
pub fn batchnorm_forward_infer(
    tape: &mut Tape,
    x: &Tensor,
    p: &BNParams,
) -> Result<Tensor, TensorError> {
    let r = p.running.as_ref().ok_or(TensorError::Invalid {
        op: "batchnorm_infer",
        what: "running statistics not initialized; train first or initialize explicitly".into(),
    })?;
    ops::batchnorm_infer(tape, x, &p.gamma, &p.beta, &r.mean, &r.var, p.eps)
}

/// Attention parameters for statistics pooling: two pointwise convolutions
/// over `[h; mean; std]` context rows.
#[derive(Debug, Clone)]
pub struct PoolParams {
    /// `[A, 3C, 1]` pointwise kernel.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[C, A, 1]` pointwise kernel.
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PoolParams {
    pub fn init(channels: usize, attention: usize, rng: &mut Prng) -> Self {
        Self {
            w1: init_uniform(rng, vec![attention, 3 * channels, 1], 3 * channels),
            b1: Tensor::zeros(vec![attention]),
            w2: init_uniform(rng, vec![channels, attention, 1], attention),
            b2: Tensor::zeros(vec![channels]),
        }
    }

    pub fn zeros(channels: usize, attention: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![attention, 3 * channels, 1]),
            b1: Tensor::zeros(vec![attention]),
            w2: Tensor::zeros(vec![channels, attention, 1]),
            b2: Tensor::zeros(vec![channels]),
        }
    }
}

/// Attentive statistics pooling over the selected frames.
///
/// Attention logits come from each frame concatenated with the masked
/// global mean/std context; softmax weight is zero at unselected frames.
/// Returns the attention-weighted mean and standard deviation, `[B, 2C]`.
pub fn attentive_stats_pool(
    tape: &mut Tape,
    h: &Tensor,
    p: &PoolParams,
    sel: Select,
) -> Result<Tensor, TensorError> {
    let t_n = match h.shape() {
        [_, _, t] => *t,
        s => {
            return Err(TensorError::RankMismatch {
                op: "attentive_stats_pool",
                expected: 3,
                got: s.to_vec(),
            })
        }
    };
    let (mean, var) = masked_moments(tape, h, sel)?;
    let std = ops::sqrt_floor(tape, &var);
    let mean_t = ops::tile_time(tape, &mean, t_n)?;
    let std_t = ops::tile_time(tape, &std, t_n)?;
    let ctx = ops::concat_channels(tape, &[h, &mean_t, &std_t])?;
    let a = ops::conv1d(tape, &ctx, &p.w1, Some(&p.b1), 1, 1)?;
    let a = ops::tanh(tape, &a);
    let logits = ops::conv1d(tape, &a, &p.w2, Some(&p.b2), 1, 1)?;
    let alpha = ops::masked_softmax_time(tape, &logits, sel)?;
    let ah = ops::mul(tape, &alpha, h)?;
    let mu = ops::masked_sum_time(tape, &ah, sel)?;
    let ahh = ops::mul(tape, &ah, h)?;
    let m2 = ops::masked_sum_time(tape, &ahh, sel)?;
    let mu2 = ops::mul(tape, &mu, &mu)?;
    let var_att = ops::sub(tape, &m2, &mu2)?;
    let sd_att = ops::sqrt_floor(tape, &var_att);
    ops::concat_rows(tape, &mu, &sd_att)
}
