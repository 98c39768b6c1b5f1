//! Speaker-embedding extractors with switchable target-mask guidance.
//!
//! Two scaled-down families share one interface: a TDNN/SE residual design
//! (`ecapa-mini`) and a dense context-gated design (`campp-mini`). Four
//! independent switches control where the target mask reaches: the input
//! rows (`guide_input`), pooling statistics (`guide_pooling`), SE / context
//! gates (`guide_se_or_cam`), and train-time batch-norm statistics
//! (`guide_bn`). With all switches off the mask is ignored entirely.

pub mod checkpoint;

use thiserror::Error;

use crate::features::{ActivityMask, FeatureSequence};
use crate::layers::{
    attentive_stats_pool, batchnorm_forward_infer, campp_mask_forward, init_uniform,
    se_block_forward, BNParams, PoolParams, SEParams, SegmentPlan,
};
use crate::rng::Prng;
use crate::tensor::{ops, Select, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model config: {what}")]
    InvalidConfig { what: String },
    #[error("mask required: at least one guide switch is on")]
    MissingMask,
    #[error("empty target mask: sample {sample} has no target-active frames")]
    EmptyTargetMask { sample: usize },
    #[error("mask length {got} does not match {expected} frames")]
    MaskLength { expected: usize, got: usize },
    #[error("batch size mismatch: {what}")]
    BatchMismatch { what: String },
    #[error("checkpoint: {what}")]
    Checkpoint { what: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which extractor family to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Family {
    #[serde(rename = "ecapa-mini")]
    EcapaMini,
    #[serde(rename = "campp-mini")]
    CamppMini,
}

/// Full architectural description of one extractor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub family: Family,
    /// Feature rows per frame the model expects (mel bins).
    pub input_features: usize,
    /// Internal channel width D.
    pub channels: usize,
    pub num_blocks: usize,
    /// Stem kernel width (must be odd).
    pub stem_kernel: usize,
    /// Block kernel width (must be odd).
    pub kernel_size: usize,
    /// Dilation per block, cycled when shorter than `num_blocks`.
    pub dilations: Vec<usize>,
    /// Channel groups in the middle block convolution.
    pub groups: usize,
    pub embedding_dim: usize,
    /// SE / context-gate bottleneck divisor r.
    pub reduction: usize,
    pub attention_channels: usize,
    /// Context-gate segment length in frames.
    pub segment_len: usize,
    /// Concatenate target / non-target activity rows to the input.
    pub guide_input: bool,
    /// Restrict pooling statistics and attention to target frames.
    pub guide_pooling: bool,
    /// Restrict SE / context-gate global context to target frames.
    pub guide_se_or_cam: bool,
    /// Restrict train-time batch-norm statistics to target frames.
    pub guide_bn: bool,
    /// Force every convolution kernel to width 1 (no temporal context).
    pub pointwise_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::EcapaMini,
            input_features: 40,
            channels: 64,
            num_blocks: 3,
            stem_kernel: 5,
            kernel_size: 3,
            dilations: vec![2, 3, 4],
            groups: 2,
            embedding_dim: 32,
            reduction: 4,
            attention_channels: 32,
            segment_len: 10,
            guide_input: false,
            guide_pooling: false,
            guide_se_or_cam: false,
            guide_bn: false,
            pointwise_only: false,
        }
    }
}

impl ModelConfig {
    /// Mask-blind extractor.
    pub fn baseline(family: Family) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    /// Input conditioning plus masked pooling.
    pub fn guided(family: Family) -> Self {
        Self {
            family,
            guide_input: true,
            guide_pooling: true,
            ..Self::default()
        }
    }

    /// Guided extractor with masked SE/context-gate and batch-norm
    /// statistics on top.
    pub fn proposed(family: Family) -> Self {
        Self {
            family,
            guide_input: true,
            guide_pooling: true,
            guide_se_or_cam: true,
            guide_bn: true,
            ..Self::default()
        }
    }

    pub fn any_guide(&self) -> bool {
        self.guide_input || self.guide_pooling || self.guide_se_or_cam || self.guide_bn
    }

    /// Input channels after optional activity rows.
    pub fn in_channels(&self) -> usize {
        self.input_features + if self.guide_input { 2 } else { 0 }
    }

    fn effective_stem_kernel(&self) -> usize {
        if self.pointwise_only {
            1
        } else {
            self.stem_kernel
        }
    }

    fn effective_kernel(&self) -> usize {
        if self.pointwise_only {
            1
        } else {
            self.kernel_size
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |what: String| Err(EncoderError::InvalidConfig { what });
        if self.input_features == 0 || self.channels == 0 || self.embedding_dim == 0 {
            return bad("feature, channel and embedding sizes must be positive".into());
        }
        if self.num_blocks == 0 {
            return bad("need at least one block".into());
        }
        if self.reduction == 0
            || self.channels < self.reduction
            || self.channels % self.reduction != 0
        {
            return bad(format!(
                "reduction {} must divide channels {}",
                self.reduction, self.channels
            ));
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            return bad(format!(
                "groups {} must divide channels {}",
                self.groups, self.channels
            ));
        }
        if self.stem_kernel % 2 == 0 || self.kernel_size % 2 == 0 {
            return bad("kernel widths must be odd for centered padding".into());
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must be non-empty and positive".into());
        }
        if self.attention_channels == 0 || self.segment_len == 0 {
            return bad("attention channels and segment length must be positive".into());
        }
        Ok(())
    }
}

/// One convolution's kernel and bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(rng: &mut Prng, c_out: usize, c_in: usize, k: usize, groups: usize) -> Self {
        let c_in_g = c_in / groups;
        Self {
            kernel: init_uniform(rng, vec![c_out, c_in_g, k], c_in_g * k),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EcapaBlock {
    pub conv_in: ConvLayer,
    pub bn_in: BNParams,
    pub conv_mid: ConvLayer,
    pub bn_mid: BNParams,
    pub conv_out: ConvLayer,
    pub bn_out: BNParams,
    pub se: SEParams,
}

#[derive(Debug, Clone)]
pub struct CamppBlock {
    pub conv: ConvLayer,
    pub bn: BNParams,
    pub gate: SEParams,
    /// Pointwise compression after the dense concatenation, 2D → D.
    pub transition: ConvLayer,
}

#[derive(Debug, Clone)]
pub enum FamilyParams {
    Ecapa {
        blocks: Vec<EcapaBlock>,
    },
    Campp {
        blocks: Vec<CamppBlock>,
    },
}

/// A built extractor: config plus all parameters and normalization state.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: ConvLayer,
    pub bn_stem: BNParams,
    pub family: FamilyParams,
    pub pool: PoolParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Deterministically initializes a model from a seed. Parameter draws
/// depend only on shapes, so configs differing in guide switches alone get
/// bitwise-identical parameters from the same seed. Batch-norm running
/// statistics start at mean 0, variance 1, so an untrained model can run
/// inference.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, EncoderError> {
    config.validate()?;
    let mut rng = Prng::seed(seed);
    let d = config.channels;
    let stem = ConvLayer::init(
        &mut rng,
        d,
        config.in_channels(),
        config.effective_stem_kernel(),
        1,
    );
    let bn_stem = BNParams::new(d).with_unit_running();
    let family = match config.family {
        Family::EcapaMini => {
            let mut blocks = Vec::with_capacity(config.num_blocks);
            for _ in 0..config.num_blocks {
                blocks.push(EcapaBlock {
                    conv_in: ConvLayer::init(&mut rng, d, d, 1, 1),
                    bn_in: BNParams::new(d).with_unit_running(),
                    conv_mid: ConvLayer::init(
                        &mut rng,
                        d,
                        d,
                        config.effective_kernel(),
                        config.groups,
                    ),
                    bn_mid: BNParams::new(d).with_unit_running(),
                    conv_out: ConvLayer::init(&mut rng, d, d, 1, 1),
                    bn_out: BNParams::new(d).with_unit_running(),
                    se: SEParams::init(d, config.reduction, &mut rng)?,
                });
            }
            FamilyParams::Ecapa { blocks }
        }
        Family::CamppMini => {
            let mut blocks = Vec::with_capacity(config.num_blocks);
            for _ in 0..config.num_blocks {
                blocks.push(CamppBlock {
                    conv: ConvLayer::init(&mut rng, d, d, config.effective_kernel(), 1),
                    bn: BNParams::new(d).with_unit_running(),
                    gate: SEParams::init(d, config.reduction, &mut rng)?,
                    transition: ConvLayer::init(&mut rng, d, 2 * d, 1, 1),
                });
            }
            FamilyParams::Campp { blocks }
        }
    };
    let pool = PoolParams::init(d, config.attention_channels, &mut rng);
    let head_w = init_uniform(&mut rng, vec![config.embedding_dim, 2 * d], 2 * d);
    let head_b = Tensor::zeros(vec![config.embedding_dim]);
    Ok(Model {
        config: config.clone(),
        stem,
        bn_stem,
        family,
        pool,
        head_w,
        head_b,
    })
}

impl Model {
    /// Visits every learnable tensor with a stable name, in a fixed order.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("stem.kernel", &self.stem.kernel);
        f("stem.bias", &self.stem.bias);
        f("stem_bn.gamma", &self.bn_stem.gamma);
        f("stem_bn.beta", &self.bn_stem.beta);
        match &self.family {
            FamilyParams::Ecapa { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    f(&format!("block{i}.in.kernel"), &b.conv_in.kernel);
                    f(&format!("block{i}.in.bias"), &b.conv_in.bias);
                    f(&format!("block{i}.in_bn.gamma"), &b.bn_in.gamma);
                    f(&format!("block{i}.in_bn.beta"), &b.bn_in.beta);
                    f(&format!("block{i}.mid.kernel"), &b.conv_mid.kernel);
                    f(&format!("block{i}.mid.bias"), &b.conv_mid.bias);
                    f(&format!("block{i}.mid_bn.gamma"), &b.bn_mid.gamma);
                    f(&format!("block{i}.mid_bn.beta"), &b.bn_mid.beta);
                    f(&format!("block{i}.out.kernel"), &b.conv_out.kernel);
                    f(&format!("block{i}.out.bias"), &b.conv_out.bias);
                    f(&format!("block{i}.out_bn.gamma"), &b.bn_out.gamma);
                    f(&format!("block{i}.out_bn.beta"), &b.bn_out.beta);
                    f(&format!("block{i}.se.w3"), &b.se.w3);
                    f(&format!("block{i}.se.b3"), &b.se.b3);
                    f(&format!("block{i}.se.w4"), &b.se.w4);
                    f(&format!("block{i}.se.b4"), &b.se.b4);
                }
            }
            FamilyParams::Campp { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    f(&format!("block{i}.conv.kernel"), &b.conv.kernel);
                    f(&format!("block{i}.conv.bias"), &b.conv.bias);
                    f(&format!("block{i}.bn.gamma"), &b.bn.gamma);
                    f(&format!("block{i}.bn.beta"), &b.bn.beta);
                    f(&format!("block{i}.gate.w3"), &b.gate.w3);
                    f(&format!("block{i}.gate.b3"), &b.gate.b3);
                    f(&format!("block{i}.gate.w4"), &b.gate.w4);
                    f(&format!("block{i}.gate.b4"), &b.gate.b4);
                    f(&format!("block{i}.transition.kernel"), &b.transition.kernel);
                    f(&format!("block{i}.transition.bias"), &b.transition.bias);
                }
            }
        }
        f("pool.w1", &self.pool.w1);
        f("pool.b1", &self.pool.b1);
        f("pool.w2", &self.pool.w2);
        f("pool.b2", &self.pool.b2);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    /// Mutable visit in the same order and naming as [`Self::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("stem.kernel", &mut self.stem.kernel);
        f("stem.bias", &mut self.stem.bias);
        f("stem_bn.gamma", &mut self.bn_stem.gamma);
        f("stem_bn.beta", &mut self.bn_stem.beta);
        match &mut self.family {
            FamilyParams::Ecapa { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    f(&format!("block{i}.in.kernel"), &mut b.conv_in.kernel);
                    f(&format!("block{i}.in.bias"), &mut b.conv_in.bias);
                    f(&format!("block{i}.in_bn.gamma"), &mut b.bn_in.gamma);
                    f(&format!("block{i}.in_bn.beta"), &mut b.bn_in.beta);
                    f(&format!("block{i}.mid.kernel"), &mut b.conv_mid.kernel);
                    f(&format!("block{i}.mid.bias"), &mut b.conv_mid.bias);
                    f(&format!("block{i}.mid_bn.gamma"), &mut b.bn_mid.gamma);
                    f(&format!("block{i}.mid_bn.beta"), &mut b.bn_mid.beta);
                    f(&format!("block{i}.out.kernel"), &mut b.conv_out.kernel);
                    f(&format!("block{i}.out.bias"), &mut b.conv_out.bias);
                    f(&format!("block{i}.out_bn.gamma"), &mut b.bn_out.gamma);
                    f(&format!("block{i}.out_bn.beta"), &mut b.bn_out.beta);
                    f(&format!("block{i}.se.w3"), &mut b.se.w3);
                    f(&format!("block{i}.se.b3"), &mut b.se.b3);
                    f(&format!("block{i}.se.w4"), &mut b.se.w4);
                    f(&format!("block{i}.se.b4"), &mut b.se.b4);
                }
            }
            FamilyParams::Campp { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    f(&format!("block{i}.conv.kernel"), &mut b.conv.kernel);
                    f(&format!("block{i}.conv.bias"), &mut b.conv.bias);
                    f(&format!("block{i}.bn.gamma"), &mut b.bn.gamma);
                    f(&format!("block{i}.bn.beta"), &mut b.bn.beta);
                    f(&format!("block{i}.gate.w3"), &mut b.gate.w3);
                    f(&format!("block{i}.gate.b3"), &mut b.gate.b3);
                    f(&format!("block{i}.gate.w4"), &mut b.gate.w4);
                    f(&format!("block{i}.gate.b4"), &mut b.gate.b4);
                    f(
                        &format!("block{i}.transition.kernel"),
                        &mut b.transition.kernel,
                    );
                    f(&format!("block{i}.transition.bias"), &mut b.transition.bias);
                }
            }
        }
        f("pool.w1", &mut self.pool.w1);
        f("pool.b1", &mut self.pool.b1);
        f("pool.w2", &mut self.pool.w2);
        f("pool.b2", &mut self.pool.b2);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }

    /// Visits batch-norm state with stable names, in forward order.
    pub fn visit_bn(&self, f: &mut impl FnMut(&str, &BNParams)) {
        f("stem_bn", &self.bn_stem);
        match &self.family {
            FamilyParams::Ecapa { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    f(&format!("block{i}.in_bn"), &b.bn_in);
                    f(&format!("block{i}.mid_bn"), &b.bn_mid);
                    f(&format!("block{i}.out_bn"), &b.bn_out);
                }
            }
            FamilyParams::Campp { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    f(&format!("block{i}.bn"), &b.bn);
                }
            }
        }
    }

    /// Mutable visit in the same order as [`Self::visit_bn`].
    pub fn visit_bn_mut(&mut self, f: &mut impl FnMut(&str, &mut BNParams)) {
        f("stem_bn", &mut self.bn_stem);
        match &mut self.family {
            FamilyParams::Ecapa { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    f(&format!("block{i}.in_bn"), &mut b.bn_in);
                    f(&format!("block{i}.mid_bn"), &mut b.bn_mid);
                    f(&format!("block{i}.out_bn"), &mut b.bn_out);
                }
            }
            FamilyParams::Campp { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    f(&format!("block{i}.bn"), &mut b.bn);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    /// Clone whose learnable tensors are registered as tape leaves, for one
    /// training step. Batch-norm running statistics are shared state and are
    /// *not* tracked.
    pub fn tracked(&self, tape: &mut Tape) -> Model {
        let mut clone = self.clone();
        clone.visit_params_mut(&mut |_, t| *t = tape.leaf(t));
        clone
    }

    /// Folds collected batch statistics into the running statistics, in the
    /// same order the forward pass produced them.
    pub fn absorb_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<(), EncoderError> {
        let mut idx = 0;
        let mut err = None;
        self.visit_bn_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match updates.get(idx) {
                Some(u) => p.absorb_batch_stats(&u.mean, &u.var),
                None => err = Some(format!("missing batch statistics for {name}")),
            }
            idx += 1;
        });
        if let Some(what) = err {
            return Err(EncoderError::BatchMismatch { what });
        }
        if idx != updates.len() {
            return Err(EncoderError::BatchMismatch {
                what: format!("{} updates for {} norm layers", updates.len(), idx),
            });
        }
        Ok(())
    }
}

/// Batch statistics emitted by one norm layer during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-sample frame activity rows for a batch.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    pub target: Vec<Vec<bool>>,
    pub nontarget: Vec<Vec<bool>>,
}

impl MaskBatch {
    pub fn from_masks(masks: &[ActivityMask]) -> Self {
        Self {
            target: masks.iter().map(|m| m.q_target.clone()).collect(),
            nontarget: masks.iter().map(|m| m.q_nontarget.clone()).collect(),
        }
    }
}

/// Train-mode statistics collector; `Infer` draws on running statistics.
enum Phase<'a> {
    Train { bn_updates: &'a mut Vec<BnUpdate> },
    Infer,
}

fn apply_bn(
    tape: &mut Tape,
    x: &Tensor,
    p: &BNParams,
    sel: Select,
    phase: &mut Phase,
) -> Result<Tensor, TensorError> {
    match phase {
        Phase::Train { bn_updates } => {
            let (y, mean, var) = ops::batchnorm_train(tape, x, &p.gamma, &p.beta, sel, p.eps)?;
            bn_updates.push(BnUpdate { mean, var });
            Ok(y)
        }
        Phase::Infer => batchnorm_forward_infer(tape, x, p),
    }
}

struct SelSet<'a> {
    pool: Select<'a>,
    stats: Select<'a>,
    bn: Select<'a>,
}

fn validate_batch(
    model: &Model,
    feats: &Tensor,
    masks: Option<&MaskBatch>,
) -> Result<(usize, usize), EncoderError> {
    let shape = feats.shape();
    if shape.len() != 3 {
        return Err(EncoderError::BatchMismatch {
            what: format!("features must be [batch, rows, frames], got {shape:?}"),
        });
    }
    let (b_n, f_n, t_n) = (shape[0], shape[1], shape[2]);
    if f_n != model.config.input_features {
        return Err(EncoderError::BatchMismatch {
            what: format!(
                "model expects {} feature rows, got {f_n}",
                model.config.input_features
            ),
        });
    }
    if model.config.any_guide() {
        let masks = masks.ok_or(EncoderError::MissingMask)?;
        if masks.target.len() != b_n || masks.nontarget.len() != b_n {
            return Err(EncoderError::BatchMismatch {
                what: format!("{} mask rows for {b_n} samples", masks.target.len()),
            });
        }
        for (b, (qt, qn)) in masks.target.iter().zip(&masks.nontarget).enumerate() {
            if qt.len() != t_n {
                return Err(EncoderError::MaskLength {
                    expected: t_n,
                    got: qt.len(),
                });
            }
            if qn.len() != t_n {
                return Err(EncoderError::MaskLength {
                    expected: t_n,
                    got: qn.len(),
                });
            }
            if !qt.iter().any(|&v| v) {
                return Err(EncoderError::EmptyTargetMask { sample: b });
            }
        }
    }
    Ok((b_n, t_n))
}

/// Concatenates 0/1 activity rows under the features when `guide_input` is
/// set; otherwise passes the features through.
fn build_input(
    tape: &mut Tape,
    feats: &Tensor,
    masks: Option<&MaskBatch>,
    config: &ModelConfig,
    b_n: usize,
    t_n: usize,
) -> Result<Tensor, TensorError> {
    if !config.guide_input {
        return Ok(feats.clone());
    }
    let masks = masks.expect("validated");
    let mut rows = Vec::with_capacity(b_n * 2 * t_n);
    for b in 0..b_n {
        rows.extend(masks.target[b].iter().map(|&v| if v { 1.0 } else { 0.0 }));
        rows.extend(masks.nontarget[b].iter().map(|&v| if v { 1.0 } else { 0.0 }));
    }
    let q = Tensor::from_vec(vec![b_n, 2, t_n], rows)?;
    ops::concat_channels(tape, &[feats, &q])
}

fn forward(
    model: &Model,
    tape: &mut Tape,
    feats: &Tensor,
    masks: Option<&MaskBatch>,
    phase: &mut Phase,
) -> Result<Tensor, EncoderError> {
    let (b_n, t_n) = validate_batch(model, feats, masks)?;
    let cfg = &model.config;
    let all = vec![vec![true; t_n]; b_n];
    let target_rows: &[Vec<bool>] = match masks {
        Some(m) if cfg.any_guide() => &m.target,
        _ => &all,
    };
    let sels = SelSet {
        pool: if cfg.guide_pooling {
            Select::Rows(target_rows)
        } else {
            Select::All
        },
        stats: if cfg.guide_se_or_cam {
            Select::Rows(target_rows)
        } else {
            Select::All
        },
        bn: if cfg.guide_bn {
            Select::Rows(target_rows)
        } else {
            Select::All
        },
    };

    let x = build_input(tape, feats, masks, cfg, b_n, t_n)?;
    let h = ops::conv1d(tape, &x, &model.stem.kernel, Some(&model.stem.bias), 1, 1)?;
    let h = ops::relu(tape, &h);
    // The stem normalization sits outside the gated blocks; for the
    // context-gate family it stays unguided to match its reference design.
    let stem_bn_sel = match model.family {
        FamilyParams::Ecapa { .. } => sels.bn,
        FamilyParams::Campp { .. } => Select::All,
    };
    let mut h = apply_bn(tape, &h, &model.bn_stem, stem_bn_sel, phase)?;

    match &model.family {
        FamilyParams::Ecapa { blocks } => {
            for (i, b) in blocks.iter().enumerate() {
                let dilation = cfg.dilations[i % cfg.dilations.len()];
                let residual = h.clone();
                let a = ops::conv1d(tape, &h, &b.conv_in.kernel, Some(&b.conv_in.bias), 1, 1)?;
                let a = ops::relu(tape, &a);
                let a = apply_bn(tape, &a, &b.bn_in, sels.bn, phase)?;
                let a = ops::conv1d(
                    tape,
                    &a,
                    &b.conv_mid.kernel,
                    Some(&b.conv_mid.bias),
                    cfg.groups,
                    dilation,
                )?;
                let a = ops::relu(tape, &a);
                let a = apply_bn(tape, &a, &b.bn_mid, sels.bn, phase)?;
                let a = ops::conv1d(tape, &a, &b.conv_out.kernel, Some(&b.conv_out.bias), 1, 1)?;
                let a = ops::relu(tape, &a);
                let a = apply_bn(tape, &a, &b.bn_out, sels.bn, phase)?;
                let se = se_block_forward(tape, &a, &b.se, sels.stats)?;
                h = ops::add(tape, &residual, &se.scaled)?;
            }
        }
        FamilyParams::Campp { blocks } => {
            let plan = SegmentPlan::fixed(cfg.segment_len, t_n)?;
            for (i, b) in blocks.iter().enumerate() {
                let dilation = cfg.dilations[i % cfg.dilations.len()];
                let gated = campp_mask_forward(
                    tape,
                    &h,
                    &b.gate,
                    |tape, x| {
                        let c =
                            ops::conv1d(tape, x, &b.conv.kernel, Some(&b.conv.bias), 1, dilation)?;
                        let r = ops::relu(tape, &c);
                        apply_bn(tape, &r, &b.bn, sels.bn, phase)
                    },
                    &plan,
                    sels.stats,
                )?;
                let dense = ops::concat_channels(tape, &[&h, &gated.scaled])?;
                let t = ops::conv1d(
                    tape,
                    &dense,
                    &b.transition.kernel,
                    Some(&b.transition.bias),
                    1,
                    1,
                )?;
                h = ops::relu(tape, &t);
            }
        }
    }

    let pooled = attentive_stats_pool(tape, &h, &model.pool, sels.pool)?;
    Ok(ops::affine_rows(
        tape,
        &pooled,
        &model.head_w,
        &model.head_b,
    )?)
}

/// Train-mode batched forward: `[B, F, T]` features to `[B, E]` embeddings.
/// Appends one [`BnUpdate`] per norm layer to `bn_updates`, in the order
/// [`Model::visit_bn`] walks them.
pub fn forward_train(
    model: &Model,
    tape: &mut Tape,
    feats: &Tensor,
    masks: Option<&MaskBatch>,
    bn_updates: &mut Vec<BnUpdate>,
) -> Result<Tensor, EncoderError> {
    forward(model, tape, feats, masks, &mut Phase::Train { bn_updates })
}

/// Inference-mode batched forward using batch-norm running statistics.
pub fn forward_infer(
    model: &Model,
    tape: &mut Tape,
    feats: &Tensor,
    masks: Option<&MaskBatch>,
) -> Result<Tensor, EncoderError> {
    forward(model, tape, feats, masks, &mut Phase::Infer)
}

/// A fixed-dimensional speaker representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Extracts one embedding. Guided configs require a mask with at least one
/// target-active frame; a mask handed to an unguided model is ignored.
pub fn extract_embedding(
    model: &Model,
    features: &FeatureSequence,
    mask: Option<&ActivityMask>,
) -> Result<Embedding, EncoderError> {
    let t_n = features.num_frames();
    if let Some(m) = mask {
        if m.len() != t_n {
            return Err(EncoderError::MaskLength {
                expected: t_n,
                got: m.len(),
            });
        }
    }
    let feats = features
        .frames
        .reshaped(vec![1, features.num_features(), t_n])?;
    let mask_batch = mask.map(|m| MaskBatch {
        target: vec![m.q_target.clone()],
        nontarget: vec![m.q_nontarget.clone()],
    });
    let mut tape = Tape::new();
    let out = forward_infer(model, &mut tape, &feats, mask_batch.as_ref())?;
    let vector = out.data().to_vec();
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(EncoderError::BatchMismatch {
            what: "non-finite embedding".into(),
        });
    }
    Ok(Embedding { vector })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(family: Family) -> ModelConfig {
        ModelConfig {
            family,
            input_features: 4,
            channels: 8,
            num_blocks: 2,
            stem_kernel: 5,
            kernel_size: 3,
            dilations: vec![2, 3],
            groups: 2,
            embedding_dim: 6,
            reduction: 4,
            attention_channels: 5,
            segment_len: 4,
            ..ModelConfig::default()
        }
    }

    fn random_features(rng: &mut Prng, f_n: usize, t_n: usize) -> FeatureSequence {
        FeatureSequence {
            frames: Tensor::from_vec(vec![f_n, t_n], rng.gaussian_vec(f_n * t_n, 1.0)).unwrap(),
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        }
    }

    fn random_mask(rng: &mut Prng, t_n: usize) -> ActivityMask {
        loop {
            let q_target: Vec<bool> = (0..t_n).map(|_| rng.uniform() < 0.5).collect();
            if q_target.iter().any(|&b| b) {
                let q_nontarget = (0..t_n).map(|_| rng.uniform() < 0.5).collect();
                return ActivityMask {
                    q_target,
                    q_nontarget,
                };
            }
        }
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = tiny_config(Family::EcapaMini);
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        let mut names = Vec::new();
        a.visit_params(&mut |n, t| names.push((n.to_string(), t.data().to_vec())));
        b.visit_params(&mut |n, t| {
            let (n2, d2) = names.remove(0);
            assert_eq!(n, n2);
            assert_eq!(t.data(), d2.as_slice());
        });
        let c = build_model(&cfg, 43).unwrap();
        assert_ne!(a.stem.kernel.data(), c.stem.kernel.data());
    }

    #[test]
    fn guide_switches_do_not_change_initialization() {
        // Switches that leave shapes alone must leave the draws alone too.
        let mut guided = tiny_config(Family::EcapaMini);
        guided.guide_input = true;
        guided.guide_pooling = true;
        let mut proposed = guided.clone();
        proposed.guide_se_or_cam = true;
        proposed.guide_bn = true;
        let a = build_model(&guided, 7).unwrap();
        let b = build_model(&proposed, 7).unwrap();
        let mut flat_a = Vec::new();
        a.visit_params(&mut |_, t| flat_a.extend_from_slice(t.data()));
        let mut flat_b = Vec::new();
        b.visit_params(&mut |_, t| flat_b.extend_from_slice(t.data()));
        assert_eq!(flat_a, flat_b);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config(Family::EcapaMini);
        let model = build_model(&cfg, 1).unwrap();
        let (d, f, e, a, r, g, k, ks) = (8usize, 4usize, 6usize, 5usize, 4usize, 2usize, 3usize, 5usize);
        let h = d / r;
        let stem = d * f * ks + d + 2 * d;
        let per_block = (d * d + d + 2 * d) // pointwise in + bn
            + (d * (d / g) * k + d + 2 * d) // grouped dilated + bn
            + (d * d + d + 2 * d) // pointwise out + bn
            + (h * d + h + d * h + d); // gate
        let pool = a * 3 * d + a + d * a + d;
        let head = e * 2 * d + e;
        assert_eq!(model.num_params(), stem + 2 * per_block + pool + head);

        let cfg = tiny_config(Family::CamppMini);
        let model = build_model(&cfg, 1).unwrap();
        let per_block = (d * d * k + d + 2 * d) // dilated conv + bn
            + (h * d + h + d * h + d) // gate
            + (d * 2 * d + d); // dense transition
        assert_eq!(model.num_params(), stem + 2 * per_block + pool + head);
    }

    #[test]
    fn pointwise_only_shrinks_every_kernel() {
        for family in [Family::EcapaMini, Family::CamppMini] {
            let mut cfg = tiny_config(family);
            cfg.pointwise_only = true;
            let model = build_model(&cfg, 1).unwrap();
            model.visit_params(&mut |name, t| {
                if name.ends_with(".kernel") {
                    assert_eq!(t.shape()[2], 1, "{name}");
                }
            });
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.num_blocks = 0;
        assert!(build_model(&cfg, 1).is_err());
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.reduction = 3;
        assert!(build_model(&cfg, 1).is_err());
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.kernel_size = 4;
        assert!(build_model(&cfg, 1).is_err());
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.channels = 2;
        assert!(build_model(&cfg, 1).is_err());
    }

    #[test]
    fn baseline_ignores_a_supplied_mask() {
        for family in [Family::EcapaMini, Family::CamppMini] {
            let cfg = tiny_config(family);
            let model = build_model(&cfg, 3).unwrap();
            let mut rng = Prng::seed(8);
            let feats = random_features(&mut rng, 4, 13);
            let mask = random_mask(&mut rng, 13);
            let with = extract_embedding(&model, &feats, Some(&mask)).unwrap();
            let without = extract_embedding(&model, &feats, None).unwrap();
            assert_eq!(with.vector, without.vector);
            assert_eq!(with.dim(), 6);
        }
    }

    #[test]
    fn guided_model_requires_a_nonempty_target_mask() {
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.guide_pooling = true;
        let model = build_model(&cfg, 3).unwrap();
        let mut rng = Prng::seed(9);
        let feats = random_features(&mut rng, 4, 10);
        assert!(matches!(
            extract_embedding(&model, &feats, None),
            Err(EncoderError::MissingMask)
        ));
        let empty = ActivityMask {
            q_target: vec![false; 10],
            q_nontarget: vec![true; 10],
        };
        assert!(matches!(
            extract_embedding(&model, &feats, Some(&empty)),
            Err(EncoderError::EmptyTargetMask { sample: 0 })
        ));
        let short = ActivityMask {
            q_target: vec![true; 9],
            q_nontarget: vec![false; 9],
        };
        assert!(matches!(
            extract_embedding(&model, &feats, Some(&short)),
            Err(EncoderError::MaskLength { .. })
        ));
    }

    #[test]
    fn proposed_equals_guided_under_all_ones_masks() {
        for family in [Family::EcapaMini, Family::CamppMini] {
            let mut guided = tiny_config(family);
            guided.guide_input = true;
            guided.guide_pooling = true;
            let mut proposed = guided.clone();
            proposed.guide_se_or_cam = true;
            proposed.guide_bn = true;
            let mg = build_model(&guided, 11).unwrap();
            let mp = build_model(&proposed, 11).unwrap();
            let mut rng = Prng::seed(12);
            let feats = random_features(&mut rng, 4, 17);
            let ones = ActivityMask {
                q_target: vec![true; 17],
                q_nontarget: vec![true; 17],
            };
            let eg = extract_embedding(&mg, &feats, Some(&ones)).unwrap();
            let ep = extract_embedding(&mp, &feats, Some(&ones)).unwrap();
            assert_eq!(eg.vector, ep.vector, "family {family:?}");
        }
    }

    #[test]
    fn train_forward_collects_one_update_per_norm_layer() {
        for family in [Family::EcapaMini, Family::CamppMini] {
            let mut cfg = tiny_config(family);
            cfg.guide_input = true;
            cfg.guide_pooling = true;
            cfg.guide_bn = true;
            let mut model = build_model(&cfg, 5).unwrap();
            let mut expected = 0;
            model.visit_bn(&mut |_, _| expected += 1);
            let mut rng = Prng::seed(6);
            let (b_n, t_n) = (3, 12);
            let feats =
                Tensor::from_vec(vec![b_n, 4, t_n], rng.gaussian_vec(b_n * 4 * t_n, 1.0)).unwrap();
            let masks = MaskBatch::from_masks(&[
                random_mask(&mut rng, t_n),
                random_mask(&mut rng, t_n),
                random_mask(&mut rng, t_n),
            ]);
            let mut tape = Tape::new();
            let mut updates = Vec::new();
            let out =
                forward_train(&model, &mut tape, &feats, Some(&masks), &mut updates).unwrap();
            assert_eq!(out.shape(), &[b_n, 6]);
            assert_eq!(updates.len(), expected);
            let before: Vec<Vec<f64>> = {
                let mut v = Vec::new();
                model.visit_bn(&mut |_, p| v.push(p.running.as_ref().unwrap().mean.clone()));
                v
            };
            model.absorb_bn_updates(&updates).unwrap();
            let mut changed = 0;
            let mut i = 0;
            model.visit_bn(&mut |_, p| {
                if p.running.as_ref().unwrap().mean != before[i] {
                    changed += 1;
                }
                i += 1;
            });
            assert_eq!(changed, expected, "family {family:?}");
        }
    }

    #[test]
    fn pointwise_proposed_embedding_survives_nontarget_tiling() {
        let mut cfg = tiny_config(Family::EcapaMini);
        cfg.pointwise_only = true;
        cfg.guide_input = true;
        cfg.guide_pooling = true;
        cfg.guide_se_or_cam = true;
        cfg.guide_bn = true;
        let model = build_model(&cfg, 21).unwrap();
        let mut rng = Prng::seed(22);
        let t_n = 14;
        let feats = random_features(&mut rng, 4, t_n);
        let mask = random_mask(&mut rng, t_n);

        // Append three copies of a non-target frame block at the end.
        let extra = 3;
        let (f_n, src) = (4, feats.frames.data());
        let mut long = Vec::new();
        for f in 0..f_n {
            long.extend_from_slice(&src[f * t_n..(f + 1) * t_n]);
            for _ in 0..extra {
                long.push(src[f * t_n]);
            }
        }
        let feats_long = FeatureSequence {
            frames: Tensor::from_vec(vec![f_n, t_n + extra], long).unwrap(),
            frame_shift_s: feats.frame_shift_s,
            frame_length_s: feats.frame_length_s,
        };
        let mut mask_long = mask.clone();
        mask_long.q_target.extend(std::iter::repeat(false).take(extra));
        mask_long
            .q_nontarget
            .extend(std::iter::repeat(true).take(extra));

        let a = extract_embedding(&model, &feats, Some(&mask)).unwrap();
        let b = extract_embedding(&model, &feats_long, Some(&mask_long)).unwrap();
        for (x, y) in a.vector.iter().zip(&b.vector) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn embeddings_are_deterministic() {
        let cfg = tiny_config(Family::CamppMini);
        let model = build_model(&cfg, 2).unwrap();
        let mut rng = Prng::seed(3);
        let feats = random_features(&mut rng, 4, 23);
        let a = extract_embedding(&model, &feats, None).unwrap();
        let b = extract_embedding(&model, &feats, None).unwrap();
        assert_eq!(a.vector, b.vector);
    }
}
