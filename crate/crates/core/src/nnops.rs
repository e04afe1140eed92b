//! Searchable neural operations and the forecasting model built from an
//! architecture specification.
//!
//! Every forward helper here takes the tape plus parameter handles, and the
//! candidate-bearing helpers accept optional per-candidate mixing weights
//! (tape variables). With a single candidate and no weight they compute the
//! plain discretized operation; with several weighted candidates they
//! compute the softmax-mixed super-network path. This keeps the sub-network
//! and hyper-network numerically identical by construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamKind, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::searchspace::{
    ActivationKind, ArchitectureSpec, AttentionKind, BlockSpec, EncodingKind, SearchSpaceConfig,
    WidthFactor,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Model dimensions and input geometry. Fields omitted from a config file
/// take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden size d_m.
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    /// Input window length T_L.
    pub lookback: usize,
    /// Forecast length T_P.
    pub horizon: usize,
    pub num_channels: usize,
    /// Dropout probability on attention weights and the FFN hidden layer.
    pub dropout: f64,
    /// Standardize each window by its own lookback mean/std and invert on
    /// the output.
    pub instance_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            num_blocks: 3,
            num_heads: 4,
            patch_len: 16,
            patch_stride: 8,
            lookback: 512,
            horizon: 96,
            num_channels: 1,
            dropout: 0.1,
            instance_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_blocks == 0 || self.num_heads == 0 {
            return Err(Error::config("d_model, num_blocks, and num_heads must be positive"));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "d_model {} must be even so the 0.5 width factor stays integral",
                self.d_model
            )));
        }
        if self.patch_len == 0 || self.patch_stride == 0 {
            return Err(Error::config("patch_len and patch_stride must be positive"));
        }
        if self.patch_len > self.lookback {
            return Err(Error::config(format!(
                "patch_len {} exceeds lookback {}",
                self.patch_len, self.lookback
            )));
        }
        if self.horizon == 0 || self.num_channels == 0 {
            return Err(Error::config("horizon and num_channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Patch count l = floor((T_L - patch_len) / stride) + 1.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_len) / self.patch_stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Which candidates each slot of one block carries parameters for. A plain
/// sub-network uses singletons; the hyper-network uses the full sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCandidates {
    pub enc_attn: Vec<EncodingKind>,
    pub enc_ffn: Vec<EncodingKind>,
    pub attn: Vec<AttentionKind>,
    pub act: Vec<ActivationKind>,
    pub k: Vec<WidthFactor>,
}

impl BlockCandidates {
    pub fn from_spec(spec: &BlockSpec) -> Self {
        BlockCandidates {
            enc_attn: vec![spec.enc_attn],
            enc_ffn: vec![spec.enc_ffn],
            attn: vec![spec.attn],
            act: vec![spec.act],
            k: vec![spec.k],
        }
    }

    pub fn from_space(space: &SearchSpaceConfig, slot_of_enc_attn: bool) -> Vec<EncodingKind> {
        if slot_of_enc_attn {
            space.encodings_attn.iter().copied().collect()
        } else {
            space.encodings_ffn.iter().copied().collect()
        }
    }

    pub fn full(space: &SearchSpaceConfig) -> Self {
        BlockCandidates {
            enc_attn: space.encodings_attn.iter().copied().collect(),
            enc_ffn: space.encodings_ffn.iter().copied().collect(),
            attn: space.attention.iter().copied().collect(),
            act: space.activations.iter().copied().collect(),
            k: space.widths.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvParams {
    /// Depthwise filter, [kernel, d_m].
    pub depthwise: ParamId,
    /// Pointwise channel mix, [d_m, d_m].
    pub pointwise: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfnParams {
    /// [d_m, k·d_m]
    pub up: ParamId,
    /// [k·d_m, d_m]
    pub down: ParamId,
}

/// Parameter handles for one block. Only candidates listed at allocation
/// time get entries; the attention projections are shared by all score
/// kinds, and each score kind owns only its per-head scoring weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln_attn: (ParamId, ParamId),
    pub ln_ffn: (ParamId, ParamId),
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    /// Per attention kind, per head: the score-specific weights (empty for
    /// the dot product).
    pub score_weights: BTreeMap<AttentionKind, Vec<ParamId>>,
    pub ffn: BTreeMap<WidthFactor, FfnParams>,
    pub enc_attn: BTreeMap<EncodingKind, ConvParams>,
    pub enc_ffn: BTreeMap<EncodingKind, ConvParams>,
}

/// Parameter handles for the whole model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// W_d shape for a score kind, on head dimension d_h.
pub fn score_weight_shape(kind: AttentionKind, d_h: usize) -> Option<Vec<usize>> {
    match kind {
        AttentionKind::Dot_Attn => None,
        AttentionKind::EP_Attn | AttentionKind::Minus_Attn => Some(vec![d_h, 1]),
        AttentionKind::Concat_Attn => Some(vec![2 * d_h, 1]),
        AttentionKind::Bilinear_Attn => Some(vec![d_h, d_h]),
    }
}

fn alloc_conv(
    set: &mut ParamSet,
    name: &str,
    kernel: usize,
    d_m: usize,
    rng: &mut Prng,
    gain: f64,
) -> ConvParams {
    let dw = alloc_matrix(set, &format!("{name}.depthwise"), vec![kernel, d_m], kernel, rng, gain);
    let pw = alloc_matrix(set, &format!("{name}.pointwise"), vec![d_m, d_m], d_m, rng, gain);
    ConvParams { depthwise: dw, pointwise: pw }
}

fn alloc_matrix(
    set: &mut ParamSet,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
    rng: &mut Prng,
    gain: f64,
) -> ParamId {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
    set.add(name, ParamKind::Model, shape, data)
}

impl ModelParams {
    /// Allocate parameters for every listed candidate. `gain` scales the
    /// random init (1.0 for training; teacher generators may use more).
    pub fn alloc(
        set: &mut ParamSet,
        cfg: &ModelConfig,
        candidates: &[BlockCandidates],
        rng: &mut Prng,
        gain: f64,
    ) -> Result<ModelParams> {
        cfg.validate()?;
        if candidates.len() != cfg.num_blocks {
            return Err(Error::config(format!(
                "expected candidate sets for {} blocks, got {}",
                cfg.num_blocks,
                candidates.len()
            )));
        }
        let d_m = cfg.d_model;
        let d_h = cfg.head_dim();
        let l = cfg.num_patches();
        let patch_w = alloc_matrix(set, "patch.w", vec![cfg.patch_len, d_m], cfg.patch_len, rng, gain);
        let patch_b = set.add_zeros("patch.b", ParamKind::Model, vec![d_m]);
        let pos_data: Vec<f64> = (0..l * d_m).map(|_| rng.uniform(-0.02, 0.02)).collect();
        let pos = set.add("patch.pos", ParamKind::Model, vec![l, d_m], pos_data);

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for (b, cand) in candidates.iter().enumerate() {
            let p = |s: &str| format!("block{b}.{s}");
            let ln_attn = (
                set.add(&p("ln_attn.gamma"), ParamKind::Model, vec![d_m], vec![1.0; d_m]),
                set.add_zeros(&p("ln_attn.beta"), ParamKind::Model, vec![d_m]),
            );
            let ln_ffn = (
                set.add(&p("ln_ffn.gamma"), ParamKind::Model, vec![d_m], vec![1.0; d_m]),
                set.add_zeros(&p("ln_ffn.beta"), ParamKind::Model, vec![d_m]),
            );
            let w_q = alloc_matrix(set, &p("attn.w_q"), vec![d_m, d_m], d_m, rng, gain);
            let b_q = set.add_zeros(&p("attn.b_q"), ParamKind::Model, vec![d_m]);
            let w_k = alloc_matrix(set, &p("attn.w_k"), vec![d_m, d_m], d_m, rng, gain);
            let b_k = set.add_zeros(&p("attn.b_k"), ParamKind::Model, vec![d_m]);
            let w_v = alloc_matrix(set, &p("attn.w_v"), vec![d_m, d_m], d_m, rng, gain);
            let b_v = set.add_zeros(&p("attn.b_v"), ParamKind::Model, vec![d_m]);
            let w_o = alloc_matrix(set, &p("attn.w_o"), vec![d_m, d_m], d_m, rng, gain);
            let b_o = set.add_zeros(&p("attn.b_o"), ParamKind::Model, vec![d_m]);

            let mut score_weights = BTreeMap::new();
            for &kind in &cand.attn {
                let mut heads = Vec::new();
                if let Some(shape) = score_weight_shape(kind, d_h) {
                    let fan_in = shape[0];
                    for h in 0..cfg.num_heads {
                        heads.push(alloc_matrix(
                            set,
                            &p(&format!("attn.{kind}.h{h}.w_d")),
                            shape.clone(),
                            fan_in,
                            rng,
                            gain,
                        ));
                    }
                }
                score_weights.insert(kind, heads);
            }

            let mut ffn = BTreeMap::new();
            for &k in &cand.k {
                let d_f = k.hidden_dim(d_m);
                ffn.insert(
                    k,
                    FfnParams {
                        up: alloc_matrix(set, &p(&format!("ffn.k{k}.up")), vec![d_m, d_f], d_m, rng, gain),
                        down: alloc_matrix(set, &p(&format!("ffn.k{k}.down")), vec![d_f, d_m], d_f, rng, gain),
                    },
                );
            }

            let mut enc_attn = BTreeMap::new();
            for &kind in &cand.enc_attn {
                if let Some(kernel) = kind.kernel() {
                    enc_attn.insert(kind, alloc_conv(set, &p(&format!("enc_attn.{kind}")), kernel, d_m, rng, gain));
                }
            }
            let mut enc_ffn = BTreeMap::new();
            for &kind in &cand.enc_ffn {
                if let Some(kernel) = kind.kernel() {
                    enc_ffn.insert(kind, alloc_conv(set, &p(&format!("enc_ffn.{kind}")), kernel, d_m, rng, gain));
                }
            }

            blocks.push(BlockParams {
                ln_attn,
                ln_ffn,
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                score_weights,
                ffn,
                enc_attn,
                enc_ffn,
            });
        }

        let head_w = alloc_matrix(set, "head.w", vec![l * d_m, cfg.horizon], l * d_m, rng, gain);
        let head_b = set.add_zeros("head.b", ParamKind::Model, vec![cfg.horizon]);
        Ok(ModelParams {
            patch_w,
            patch_b,
            pos,
            blocks,
            head_w,
            head_b,
        })
    }
}

/// Generates dropout masks during training forwards; absent in evaluation.
pub struct DropoutGen<'r> {
    pub p: f64,
    pub rng: &'r mut Prng,
}

impl<'r> DropoutGen<'r> {
    fn mask(&mut self, numel: usize) -> Vec<f64> {
        let keep = 1.0 - self.p;
        (0..numel)
            .map(|_| {
                if self.rng.uniform(0.0, 1.0) < self.p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, drop: &mut Option<DropoutGen<'_>>) -> Result<Var> {
    match drop {
        Some(g) if g.p > 0.0 => {
            let numel = tape.tensor(x).numel();
            let mask = g.mask(numel);
            tape.dropout(x, mask)
        }
        _ => Ok(x),
    }
}

/// A candidate paired with its mixture weight; `None` means this is the
/// only candidate and no scaling is applied.
pub type Weighted<T> = (T, Option<Var>);

fn mix(tape: &mut Tape, outs: Vec<(Var, Option<Var>)>) -> Result<Var> {
    if outs.len() == 1 && outs[0].1.is_none() {
        return Ok(outs[0].0);
    }
    let mut scaled = Vec::with_capacity(outs.len());
    for (v, w) in outs {
        match w {
            Some(w) => scaled.push(tape.scale_by_scalar(v, w)?),
            None => scaled.push(v),
        }
    }
    tape.sum_list(&scaled)
}

// ── Patch embedding ─────────────────────────────────────────────────

/// Slice a lookback window into patches and project each to d_m, adding the
/// learned position embedding: [T_L] -> [l, d_m].
pub fn patch_embed(
    tape: &mut Tape,
    set: &ParamSet,
    mp: &ModelParams,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let patches = tape.patchify(x, cfg.patch_len, cfg.patch_stride)?;
    let w = tape.param(set, mp.patch_w);
    let b = tape.param(set, mp.patch_b);
    let pos = tape.param(set, mp.pos);
    let proj = tape.matmul(patches, w)?;
    let proj = tape.add_row(proj, b)?;
    tape.add(proj, pos)
}

// ── Attention ───────────────────────────────────────────────────────

/// Raw (pre-softmax) score matrix for one head. `w_d` must be the kind's
/// score weights, already bound to the tape (ignored by the dot product).
pub fn attention_scores(
    tape: &mut Tape,
    kind: AttentionKind,
    q: Var,
    k: Var,
    w_d: Option<Var>,
) -> Result<Var> {
    if tape.shape(q) != tape.shape(k) {
        return Err(Error::Dimension {
            op: "attention_scores",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let l = tape.tensor(q).rows();
    let d_h = tape.tensor(q).cols();
    let need = |kind: AttentionKind| -> Result<Var> {
        w_d.ok_or_else(|| Error::usage(format!("{kind} needs its score weights")))
    };
    match kind {
        AttentionKind::Dot_Attn => {
            let s = tape.matmul_nt(q, k)?;
            tape.scale(s, 1.0 / (d_h as f64).sqrt())
        }
        AttentionKind::EP_Attn => {
            let w = need(kind)?;
            let qp = tape.repeat_rows(q, l)?;
            let kp = tape.tile_rows(k, l)?;
            let had = tape.mul(qp, kp)?;
            let t = tape.tanh(had)?;
            let s = tape.matmul(t, w)?;
            tape.reshape(s, vec![l, l])
        }
        AttentionKind::Bilinear_Attn => {
            let w = need(kind)?;
            let qw = tape.matmul(q, w)?;
            tape.matmul_nt(qw, k)
        }
        AttentionKind::Concat_Attn => {
            let w = need(kind)?;
            let qp = tape.repeat_rows(q, l)?;
            let kp = tape.tile_rows(k, l)?;
            let cat = tape.concat_cols(&[qp, kp])?;
            let t = tape.tanh(cat)?;
            let s = tape.matmul(t, w)?;
            tape.reshape(s, vec![l, l])
        }
        AttentionKind::Minus_Attn => {
            let w = need(kind)?;
            let qp = tape.repeat_rows(q, l)?;
            let kp = tape.tile_rows(k, l)?;
            let diff = tape.sub(qp, kp)?;
            let t = tape.tanh(diff)?;
            let s = tape.matmul(t, w)?;
            tape.reshape(s, vec![l, l])
        }
    }
}

/// Multi-head attention over already-normalized input, mixing one or more
/// score kinds at the per-head context level (the value paths are linear,
/// so mixing contexts equals mixing full per-kind attention outputs).
pub fn attention_module(
    tape: &mut Tape,
    set: &ParamSet,
    bp: &BlockParams,
    cfg: &ModelConfig,
    x: Var,
    kinds: &[Weighted<AttentionKind>],
    drop: &mut Option<DropoutGen<'_>>,
) -> Result<Var> {
    if kinds.is_empty() {
        return Err(Error::usage("attention_module needs at least one score kind"));
    }
    let d_h = cfg.head_dim();
    let w_q = tape.param(set, bp.w_q);
    let b_q = tape.param(set, bp.b_q);
    let w_k = tape.param(set, bp.w_k);
    let b_k = tape.param(set, bp.b_k);
    let w_v = tape.param(set, bp.w_v);
    let b_v = tape.param(set, bp.b_v);
    let q_all = tape.matmul(x, w_q)?;
    let q_all = tape.add_row(q_all, b_q)?;
    let k_all = tape.matmul(x, w_k)?;
    let k_all = tape.add_row(k_all, b_k)?;
    let v_all = tape.matmul(x, w_v)?;
    let v_all = tape.add_row(v_all, b_v)?;

    let mut head_outputs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = tape.slice_cols(q_all, h * d_h, d_h)?;
        let k = tape.slice_cols(k_all, h * d_h, d_h)?;
        let v = tape.slice_cols(v_all, h * d_h, d_h)?;
        let mut contexts = Vec::with_capacity(kinds.len());
        for &(kind, weight) in kinds {
            let w_d = bp
                .score_weights
                .get(&kind)
                .ok_or_else(|| Error::state(format!("no parameters allocated for {kind}")))?
                .get(h)
                .copied()
                .map(|id| tape.param(set, id));
            let scores = attention_scores(tape, kind, q, k, w_d)?;
            let attn = tape.softmax(scores, 1)?;
            let attn = maybe_dropout(tape, attn, drop)?;
            let ctx = tape.matmul(attn, v)?;
            contexts.push((ctx, weight));
        }
        head_outputs.push(mix(tape, contexts)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    let w_o = tape.param(set, bp.w_o);
    let b_o = tape.param(set, bp.b_o);
    let out = tape.matmul(concat, w_o)?;
    tape.add_row(out, b_o)
}

// ── Feed-forward ────────────────────────────────────────────────────

pub fn apply_activation(tape: &mut Tape, kind: ActivationKind, x: Var) -> Result<Var> {
    match kind {
        ActivationKind::ReLU => tape.relu(x),
        ActivationKind::Leaky_ReLU => tape.leaky_relu(x, 0.01),
        ActivationKind::ELU => tape.elu(x),
        ActivationKind::SWISH => tape.swish(x),
        ActivationKind::GeLU => tape.gelu(x),
    }
}

/// Position-wise feed-forward: up-project, activation, down-project. With
/// several width factors and/or activations the branches are softmax-mixed;
/// the activation weights are shared across width branches.
pub fn ffn(
    tape: &mut Tape,
    set: &ParamSet,
    bp: &BlockParams,
    x: Var,
    widths: &[Weighted<WidthFactor>],
    acts: &[Weighted<ActivationKind>],
    drop: &mut Option<DropoutGen<'_>>,
) -> Result<Var> {
    if widths.is_empty() || acts.is_empty() {
        return Err(Error::usage("ffn needs at least one width and one activation"));
    }
    let mut branches = Vec::with_capacity(widths.len());
    for &(k, weight) in widths {
        let p = bp
            .ffn
            .get(&k)
            .ok_or_else(|| Error::state(format!("no FFN parameters allocated for width {k}")))?;
        let up = tape.param(set, p.up);
        let down = tape.param(set, p.down);
        let hidden = tape.matmul(x, up)?;
        let mut activated = Vec::with_capacity(acts.len());
        for &(a, aw) in acts {
            let y = apply_activation(tape, a, hidden)?;
            activated.push((y, aw));
        }
        let hidden = mix(tape, activated)?;
        let hidden = maybe_dropout(tape, hidden, drop)?;
        let out = tape.matmul(hidden, down)?;
        branches.push((out, weight));
    }
    mix(tape, branches)
}

// ── Encodings ───────────────────────────────────────────────────────

/// One encoding branch: Null yields zeros, Skip the input, and Conv_k a
/// depthwise convolution along the patch axis followed by a pointwise mix.
pub fn apply_encoding(
    tape: &mut Tape,
    set: &ParamSet,
    kind: EncodingKind,
    conv: Option<&ConvParams>,
    x: Var,
) -> Result<Var> {
    match kind {
        EncodingKind::Null => {
            let shape = tape.shape(x).to_vec();
            Ok(tape.constant(Tensor::zeros(shape)))
        }
        EncodingKind::Skip => Ok(x),
        EncodingKind::Conv_1 | EncodingKind::Conv_3 | EncodingKind::Conv_5 => {
            let kernel = kind.kernel().unwrap();
            let p = conv
                .ok_or_else(|| Error::state(format!("no parameters allocated for {kind}")))?;
            let dw = tape.param(set, p.depthwise);
            let pw = tape.param(set, p.pointwise);
            let y = tape.conv1d_depthwise(x, dw, kernel)?;
            tape.matmul(y, pw)
        }
    }
}

fn encoding_mixed(
    tape: &mut Tape,
    set: &ParamSet,
    table: &BTreeMap<EncodingKind, ConvParams>,
    kinds: &[Weighted<EncodingKind>],
    x: Var,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(kinds.len());
    for &(kind, weight) in kinds {
        let y = apply_encoding(tape, set, kind, table.get(&kind), x)?;
        outs.push((y, weight));
    }
    mix(tape, outs)
}

// ── Block ───────────────────────────────────────────────────────────

/// All five slot choices of one block, each with mixing weights. Plain
/// sub-networks use singletons with no weights.
pub struct BlockChoices {
    pub enc_attn: Vec<Weighted<EncodingKind>>,
    pub enc_ffn: Vec<Weighted<EncodingKind>>,
    pub attn: Vec<Weighted<AttentionKind>>,
    pub act: Vec<Weighted<ActivationKind>>,
    pub k: Vec<Weighted<WidthFactor>>,
}

impl BlockChoices {
    pub fn from_spec(spec: &BlockSpec) -> Self {
        BlockChoices {
            enc_attn: vec![(spec.enc_attn, None)],
            enc_ffn: vec![(spec.enc_ffn, None)],
            attn: vec![(spec.attn, None)],
            act: vec![(spec.act, None)],
            k: vec![(spec.k, None)],
        }
    }
}

/// One Transformer block:
///   X1 = Attn(LN(X)) + EncA(X)
///   X' = FFN(LN(X1)) + EncF(X1)
/// The attention/FFN branches see pre-normalized input; the encoding
/// branches see the raw stream, so a Skip encoding is exactly the ordinary
/// residual connection.
pub fn block_forward(
    tape: &mut Tape,
    set: &ParamSet,
    bp: &BlockParams,
    cfg: &ModelConfig,
    choices: &BlockChoices,
    x: Var,
    drop: &mut Option<DropoutGen<'_>>,
) -> Result<Var> {
    let ln1 = {
        let g = tape.param(set, bp.ln_attn.0);
        let b = tape.param(set, bp.ln_attn.1);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)?
    };
    let attn_out = attention_module(tape, set, bp, cfg, ln1, &choices.attn, drop)?;
    let enc_a = encoding_mixed(tape, set, &bp.enc_attn, &choices.enc_attn, x)?;
    let x1 = tape.add(attn_out, enc_a)?;

    let ln2 = {
        let g = tape.param(set, bp.ln_ffn.0);
        let b = tape.param(set, bp.ln_ffn.1);
        tape.layer_norm(x1, g, b, LAYER_NORM_EPS)?
    };
    let ffn_out = ffn(tape, set, bp, ln2, &choices.k, &choices.act, drop)?;
    let enc_f = encoding_mixed(tape, set, &bp.enc_ffn, &choices.enc_ffn, x1)?;
    tape.add(ffn_out, enc_f)
}

// ── Whole model ─────────────────────────────────────────────────────

/// Per-window standardization constants from the raw lookback.
#[derive(Debug, Clone, Copy)]
pub struct WindowStats {
    pub mean: f64,
    pub std: f64,
}

impl WindowStats {
    pub fn of(lookback: &[f64]) -> WindowStats {
        let n = lookback.len() as f64;
        let mean = lookback.iter().sum::<f64>() / n;
        let var = lookback.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        WindowStats {
            mean,
            std: if std > 1e-8 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|v| (v - self.mean) / self.std).collect()
    }
}

/// Run one channel's lookback window through the network on the given tape.
/// `choices` must have one entry per block. Returns the forecast in the
/// original data units.
pub fn forecast_window_on_tape(
    tape: &mut Tape,
    set: &ParamSet,
    mp: &ModelParams,
    cfg: &ModelConfig,
    choices: &[BlockChoices],
    lookback: &[f64],
    drop: &mut Option<DropoutGen<'_>>,
) -> Result<Var> {
    if lookback.len() != cfg.lookback {
        return Err(Error::Dimension {
            op: "forecast_window",
            lhs: vec![cfg.lookback],
            rhs: vec![lookback.len()],
        });
    }
    if choices.len() != cfg.num_blocks {
        return Err(Error::usage(format!(
            "expected choices for {} blocks, got {}",
            cfg.num_blocks,
            choices.len()
        )));
    }
    let stats = if cfg.instance_norm {
        WindowStats::of(lookback)
    } else {
        WindowStats { mean: 0.0, std: 1.0 }
    };
    let x = tape.constant(Tensor::vector(stats.normalize(lookback))?);
    let mut h = patch_embed(tape, set, mp, cfg, x)?;
    for (bp, ch) in mp.blocks.iter().zip(choices) {
        h = block_forward(tape, set, bp, cfg, ch, h, drop)?;
    }
    let l = cfg.num_patches();
    let flat = tape.reshape(h, vec![1, l * cfg.d_model])?;
    let w = tape.param(set, mp.head_w);
    let b = tape.param(set, mp.head_b);
    let y = tape.matmul(flat, w)?;
    let y = tape.add_row(y, b)?;
    let y = tape.reshape(y, vec![cfg.horizon])?;
    // Invert the instance standardization so the loss lives in data units.
    let y = tape.scale(y, stats.std)?;
    let mean = tape.constant(Tensor::vector(vec![stats.mean; cfg.horizon])?);
    tape.add(y, mean)
}

/// Mean squared error between forecasts and targets for a batch of
/// (lookback, target) samples, as a scalar tape node.
pub fn batch_mse_loss(
    tape: &mut Tape,
    set: &ParamSet,
    mp: &ModelParams,
    cfg: &ModelConfig,
    choices: &[BlockChoices],
    batch: &[(&[f64], &[f64])],
    drop: &mut Option<DropoutGen<'_>>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::usage("batch_mse_loss needs at least one sample"));
    }
    let mut per_sample = Vec::with_capacity(batch.len());
    for (lookback, target) in batch {
        let yhat = forecast_window_on_tape(tape, set, mp, cfg, choices, lookback, drop)?;
        let y = tape.constant(Tensor::vector(target.to_vec())?);
        let diff = tape.sub(yhat, y)?;
        let sq = tape.mul(diff, diff)?;
        per_sample.push(tape.mean_all(sq)?);
    }
    let stacked = tape.sum_list(&per_sample)?;
    tape.scale(stacked, 1.0 / per_sample.len() as f64)
}

/// A discretized forecasting model: config, architecture, and weights.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub cfg: ModelConfig,
    pub spec: ArchitectureSpec,
    pub params: ParamSet,
    pub ids: ModelParams,
}

impl ForecastModel {
    pub fn new(cfg: ModelConfig, spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::with_gain(cfg, spec, seed, 1.0)
    }

    pub fn with_gain(cfg: ModelConfig, spec: ArchitectureSpec, seed: u64, gain: f64) -> Result<Self> {
        cfg.validate()?;
        if spec.blocks.len() != cfg.num_blocks {
            return Err(Error::config(format!(
                "architecture has {} blocks but the model expects {}",
                spec.blocks.len(),
                cfg.num_blocks
            )));
        }
        let mut set = ParamSet::new();
        let mut rng = Prng::new(seed).split("model-init");
        let candidates: Vec<BlockCandidates> =
            spec.blocks.iter().map(BlockCandidates::from_spec).collect();
        let ids = ModelParams::alloc(&mut set, &cfg, &candidates, &mut rng, gain)?;
        Ok(ForecastModel {
            cfg,
            spec,
            params: set,
            ids,
        })
    }

    pub fn choices(&self) -> Vec<BlockChoices> {
        self.spec.blocks.iter().map(BlockChoices::from_spec).collect()
    }

    /// Forecast one multichannel window: input channel-major [C][T_L],
    /// output [C][T_P]. Evaluation mode (no dropout).
    pub fn forecast(&self, lookback: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if lookback.len() != self.cfg.num_channels {
            return Err(Error::Dimension {
                op: "forecast",
                lhs: vec![self.cfg.num_channels],
                rhs: vec![lookback.len()],
            });
        }
        let choices = self.choices();
        let mut out = Vec::with_capacity(lookback.len());
        for channel in lookback {
            let mut tape = Tape::new();
            let y = forecast_window_on_tape(
                &mut tape,
                &self.params,
                &self.ids,
                &self.cfg,
                &choices,
                channel,
                &mut None,
            )?;
            out.push(tape.data(y).to_vec());
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.params.total_numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_blocks: 1,
            num_heads: 2,
            patch_len: 4,
            patch_stride: 2,
            lookback: 12,
            horizon: 3,
            num_channels: 1,
            dropout: 0.0,
            instance_norm: false,
        }
    }

    #[test]
    fn patch_count_formula() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.num_patches(), 63);
        let one = ModelConfig {
            lookback: 16,
            ..ModelConfig::default()
        };
        assert_eq!(one.num_patches(), 1);
    }

    #[test]
    fn lookback_shorter_than_patch_is_rejected() {
        let cfg = ModelConfig {
            lookback: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn heads_must_divide_d_model() {
        let cfg = ModelConfig {
            d_model: 10,
            num_heads: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn q_k_leaves(tape: &mut Tape, l: usize, d_h: usize, q: Vec<f64>, k: Vec<f64>) -> (Var, Var) {
        let q = tape.leaf(Tensor::matrix(l, d_h, q).unwrap().with_grad());
        let k = tape.leaf(Tensor::matrix(l, d_h, k).unwrap().with_grad());
        (q, k)
    }

    #[test]
    fn minus_attention_zero_when_q_equals_k() {
        // Rows all identical, so every (q_i - k_j) pair is zero and
        // tanh(0) = 0 regardless of the scoring weights.
        let mut tape = Tape::new();
        let (q, k) = q_k_leaves(&mut tape, 2, 2, vec![1.0, 2.0, 1.0, 2.0], vec![1.0, 2.0, 1.0, 2.0]);
        let w = tape.leaf(Tensor::matrix(2, 1, vec![0.7, -0.3]).unwrap());
        let s = attention_scores(&mut tape, AttentionKind::Minus_Attn, q, k, Some(w)).unwrap();
        assert!(tape.data(s).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ep_attention_zero_when_k_zero() {
        let mut tape = Tape::new();
        let (q, k) = q_k_leaves(&mut tape, 2, 2, vec![1.0, -2.0, 3.0, 4.0], vec![0.0; 4]);
        let w = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let s = attention_scores(&mut tape, AttentionKind::EP_Attn, q, k, Some(w)).unwrap();
        assert!(tape.data(s).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bilinear_with_identity_reduces_to_dot() {
        let mut tape = Tape::new();
        let (q, k) = q_k_leaves(&mut tape, 2, 2, vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 1.0, 0.0]);
        let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s = attention_scores(&mut tape, AttentionKind::Bilinear_Attn, q, k, Some(w)).unwrap();
        // q0 = [1,0]: vs k0 [0,1] -> 0, vs k1 [1,0] -> 1.
        assert_eq!(tape.data(s), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_attention_hand_value() {
        let mut tape = Tape::new();
        let (q, k) = q_k_leaves(&mut tape, 1, 1, vec![0.5], vec![-0.5]);
        let w = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let s = attention_scores(&mut tape, AttentionKind::Concat_Attn, q, k, Some(w)).unwrap();
        assert!(tape.data(s)[0].abs() < 1e-15);
    }

    #[test]
    fn dot_attention_is_scaled() {
        let mut tape = Tape::new();
        let (q, k) = q_k_leaves(&mut tape, 1, 4, vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0, 1.0]);
        let s = attention_scores(&mut tape, AttentionKind::Dot_Attn, q, k, None).unwrap();
        assert!((tape.data(s)[0] - 4.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn activation_table_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, -(2.0f64.ln())]).unwrap());
        let leaky = apply_activation(&mut tape, ActivationKind::Leaky_ReLU, x).unwrap();
        assert_eq!(tape.data(leaky)[0], -0.01);
        let elu = apply_activation(&mut tape, ActivationKind::ELU, x).unwrap();
        assert_eq!(tape.data(elu)[1], 0.0);
        assert!((tape.data(elu)[2] - (-0.5)).abs() < 1e-15);
        let swish = apply_activation(&mut tape, ActivationKind::SWISH, x).unwrap();
        assert_eq!(tape.data(swish)[1], 0.0);
        let gelu = apply_activation(&mut tape, ActivationKind::GeLU, x).unwrap();
        assert_eq!(tape.data(gelu)[1], 0.0);
    }

    #[test]
    fn width_factor_hidden_dims() {
        assert_eq!(WidthFactor::Four.hidden_dim(256), 1024);
        assert_eq!(WidthFactor::Half.hidden_dim(256), 128);
    }

    #[test]
    fn conv1_identity_weights_reproduce_input() {
        let cfg = tiny_cfg();
        let mut set = ParamSet::new();
        let d_m = cfg.d_model;
        let dw = set.add("dw", ParamKind::Model, vec![1, d_m], vec![1.0; d_m]);
        let mut eye = vec![0.0; d_m * d_m];
        for i in 0..d_m {
            eye[i * d_m + i] = 1.0;
        }
        let pw = set.add("pw", ParamKind::Model, vec![d_m, d_m], eye);
        let conv = ConvParams {
            depthwise: dw,
            pointwise: pw,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::matrix(3, d_m, (0..3 * d_m).map(|v| v as f64 * 0.1).collect()).unwrap(),
        );
        let y = apply_encoding(&mut tape, &set, EncodingKind::Conv_1, Some(&conv), x).unwrap();
        let diff: f64 = tape
            .data(y)
            .iter()
            .zip(tape.data(x))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn null_encoding_is_zero_and_skip_is_identity() {
        let set = ParamSet::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let z = apply_encoding(&mut tape, &set, EncodingKind::Null, None, x).unwrap();
        assert!(tape.data(z).iter().all(|v| *v == 0.0));
        let s = apply_encoding(&mut tape, &set, EncodingKind::Skip, None, x).unwrap();
        assert_eq!(tape.data(s), tape.data(x));
    }

    #[test]
    fn forecast_shapes_and_channel_independence() {
        let mut cfg = tiny_cfg();
        cfg.num_channels = 3;
        let model = ForecastModel::new(cfg.clone(), ArchitectureSpec::vanilla(1), 7).unwrap();
        let ch: Vec<f64> = (0..cfg.lookback).map(|t| (t as f64 * 0.3).sin()).collect();
        let input = vec![ch.clone(), ch.clone(), ch];
        let out = model.forecast(&input).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.len() == cfg.horizon));
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], out[2]);
    }

    #[test]
    fn forecast_rejects_wrong_lookback() {
        let cfg = tiny_cfg();
        let model = ForecastModel::new(cfg, ArchitectureSpec::vanilla(1), 7).unwrap();
        let bad = vec![vec![0.0; 5]];
        assert!(matches!(
            model.forecast(&bad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn width_param_count_delta_is_exact() {
        let cfg = tiny_cfg();
        let d = cfg.d_model;
        let count = |k: WidthFactor| {
            let spec = ArchitectureSpec {
                blocks: vec![BlockSpec {
                    k,
                    ..BlockSpec::vanilla()
                }],
            };
            ForecastModel::new(cfg.clone(), spec, 3).unwrap().num_params()
        };
        let four = count(WidthFactor::Four);
        let one = count(WidthFactor::One);
        let half = count(WidthFactor::Half);
        assert_eq!(four - one, 2 * d * d * 3);
        assert_eq!(one - half, d * d);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let spec = ArchitectureSpec::vanilla(1);
        let model = ForecastModel::new(cfg.clone(), spec, 11).unwrap();
        let bp = &model.ids.blocks[0];
        let mut tape = Tape::new();
        let l = 5;
        let x = tape.leaf(
            Tensor::matrix(
                l,
                cfg.d_model,
                (0..l * cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
        );
        let w_q = tape.param(&model.params, bp.w_q);
        let q = tape.matmul(x, w_q).unwrap();
        let w_k = tape.param(&model.params, bp.w_k);
        let k = tape.matmul(x, w_k).unwrap();
        let qh = tape.slice_cols(q, 0, cfg.head_dim()).unwrap();
        let kh = tape.slice_cols(k, 0, cfg.head_dim()).unwrap();
        let s = attention_scores(&mut tape, AttentionKind::Dot_Attn, qh, kh, None).unwrap();
        let a = tape.softmax(s, 1).unwrap();
        for i in 0..l {
            let row: f64 = tape.data(a)[i * l..(i + 1) * l].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_weights_give_zero_forecast() {
        let cfg = tiny_cfg();
        let mut model = ForecastModel::new(cfg.clone(), ArchitectureSpec::vanilla(1), 5).unwrap();
        let head_w = model.ids.head_w;
        let head_b = model.ids.head_b;
        for v in &mut model.params.get_mut(head_w).data {
            *v = 0.0;
        }
        for v in &mut model.params.get_mut(head_b).data {
            *v = 0.0;
        }
        let input = vec![(0..cfg.lookback).map(|t| t as f64).collect::<Vec<f64>>()];
        let out = model.forecast(&input).unwrap();
        assert!(out[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn instance_norm_inverts_on_output() {
        // With zero head weights the normalized-space forecast is all zeros,
        // so the de-standardized output must equal the lookback mean.
        let mut cfg = tiny_cfg();
        cfg.instance_norm = true;
        let mut model = ForecastModel::new(cfg.clone(), ArchitectureSpec::vanilla(1), 5).unwrap();
        let head_w = model.ids.head_w;
        for v in &mut model.params.get_mut(head_w).data {
            *v = 0.0;
        }
        let input: Vec<f64> = (0..cfg.lookback).map(|t| 5.0 + (t as f64 * 0.7).sin()).collect();
        let mean = input.iter().sum::<f64>() / input.len() as f64;
        let out = model.forecast(&[input]).unwrap();
        for v in &out[0] {
            assert!((v - mean).abs() < 1e-12);
        }
    }
}
