//! The architecture search space: candidate operations, per-block choices,
//! whole-architecture specifications, and restricted sub-spaces.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention score functions. All of them consume per-head query/key rows
/// and emit one pre-softmax score per (query, key) pair.
///
/// Variant names double as the canonical operation names in architecture
/// files, traces, and logs, so they keep their underscored spelling.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Scaled dot product.
    Dot_Attn,
    /// Learned projection of tanh(q .* k).
    EP_Attn,
    /// Bilinear form q^T W k.
    Bilinear_Attn,
    /// Learned projection of tanh([q; k]).
    Concat_Attn,
    /// Learned projection of tanh(q - k).
    Minus_Attn,
}

/// Feed-forward activations.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivationKind {
    ReLU,
    Leaky_ReLU,
    ELU,
    SWISH,
    GeLU,
}

/// Operations on the residual path around attention and feed-forward.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncodingKind {
    /// Drop the residual signal entirely.
    Null,
    /// Identity pass-through (the ordinary residual connection).
    Skip,
    /// Depthwise conv (kernel 1) followed by a pointwise linear map.
    Conv_1,
    /// Depthwise conv (kernel 3) followed by a pointwise linear map.
    Conv_3,
    /// Depthwise conv (kernel 5) followed by a pointwise linear map.
    Conv_5,
}

/// Feed-forward hidden width as a multiple of the model dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WidthFactor {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "4")]
    Four,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Dot_Attn,
        AttentionKind::EP_Attn,
        AttentionKind::Bilinear_Attn,
        AttentionKind::Concat_Attn,
        AttentionKind::Minus_Attn,
    ];
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::ReLU,
        ActivationKind::Leaky_ReLU,
        ActivationKind::ELU,
        ActivationKind::SWISH,
        ActivationKind::GeLU,
    ];
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 5] = [
        EncodingKind::Null,
        EncodingKind::Skip,
        EncodingKind::Conv_1,
        EncodingKind::Conv_3,
        EncodingKind::Conv_5,
    ];

    pub fn kernel(self) -> Option<usize> {
        match self {
            EncodingKind::Conv_1 => Some(1),
            EncodingKind::Conv_3 => Some(3),
            EncodingKind::Conv_5 => Some(5),
            _ => None,
        }
    }
}

impl WidthFactor {
    pub const ALL: [WidthFactor; 4] = [
        WidthFactor::Half,
        WidthFactor::One,
        WidthFactor::Two,
        WidthFactor::Four,
    ];

    pub fn value(self) -> f64 {
        match self {
            WidthFactor::Half => 0.5,
            WidthFactor::One => 1.0,
            WidthFactor::Two => 2.0,
            WidthFactor::Four => 4.0,
        }
    }

    /// Hidden units for a given model width. All factors, including 0.5,
    /// yield whole numbers for even model widths; odd widths round down.
    pub fn hidden_dim(self, d_model: usize) -> usize {
        match self {
            WidthFactor::Half => d_model / 2,
            WidthFactor::One => d_model,
            WidthFactor::Two => 2 * d_model,
            WidthFactor::Four => 4 * d_model,
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl fmt::Display for WidthFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WidthFactor::Half => write!(f, "0.5"),
            WidthFactor::One => write!(f, "1"),
            WidthFactor::Two => write!(f, "2"),
            WidthFactor::Four => write!(f, "4"),
        }
    }
}

mod width_as_number {
    //! Architecture files carry the width factor as a JSON number
    //! (0.5, 1, 2, 4) rather than a string.
    use super::WidthFactor;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(w: &WidthFactor, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(w.value())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<WidthFactor, D::Error> {
        let v = f64::deserialize(d)?;
        WidthFactor::ALL
            .iter()
            .copied()
            .find(|w| w.value() == v)
            .ok_or_else(|| D::Error::custom(format!("width factor must be 0.5, 1, 2, or 4; got {v}")))
    }
}

/// One block's worth of architecture decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Encoding on the residual path around attention.
    pub enc_attn: EncodingKind,
    /// Encoding on the residual path around the feed-forward.
    pub enc_ffn: EncodingKind,
    /// Attention score function.
    pub attn: AttentionKind,
    /// Feed-forward activation.
    pub act: ActivationKind,
    /// Feed-forward hidden width factor.
    #[serde(with = "width_as_number")]
    pub k: WidthFactor,
}

impl BlockSpec {
    /// The standard Transformer block: residual connections everywhere,
    /// scaled dot-product attention, ReLU, 4x hidden width.
    pub fn vanilla() -> Self {
        BlockSpec {
            enc_attn: EncodingKind::Skip,
            enc_ffn: EncodingKind::Skip,
            attn: AttentionKind::Dot_Attn,
            act: ActivationKind::ReLU,
            k: WidthFactor::Four,
        }
    }
}

/// A fully discretized architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub blocks: Vec<BlockSpec>,
}

impl ArchitectureSpec {
    pub fn vanilla(num_blocks: usize) -> Self {
        ArchitectureSpec {
            blocks: vec![BlockSpec::vanilla(); num_blocks],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(path_hint: &str, text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path_hint.to_string(),
            msg: e.to_string(),
        })
    }
}

/// The five decision slots within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SlotKind {
    EncAttn,
    EncFfn,
    Attn,
    Act,
    Width,
}

impl SlotKind {
    pub const ALL: [SlotKind; 5] = [
        SlotKind::EncAttn,
        SlotKind::EncFfn,
        SlotKind::Attn,
        SlotKind::Act,
        SlotKind::Width,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::EncAttn => "enc_attn",
            SlotKind::EncFfn => "enc_ffn",
            SlotKind::Attn => "attn",
            SlotKind::Act => "act",
            SlotKind::Width => "k",
        }
    }
}

/// Which operations each decision slot may choose from, plus whether blocks
/// decide independently (macro) or share one set of decisions (micro).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    /// Blocks choose independently when true; otherwise every block shares
    /// the same five decisions.
    pub per_block: bool,
    pub attention: BTreeSet<AttentionKind>,
    pub activations: BTreeSet<ActivationKind>,
    pub encodings_attn: BTreeSet<EncodingKind>,
    pub encodings_ffn: BTreeSet<EncodingKind>,
    pub widths: BTreeSet<WidthFactor>,
}

impl SearchSpaceConfig {
    /// Everything open, blocks independent.
    pub fn full() -> Self {
        SearchSpaceConfig {
            per_block: true,
            attention: AttentionKind::ALL.into_iter().collect(),
            activations: ActivationKind::ALL.into_iter().collect(),
            encodings_attn: EncodingKind::ALL.into_iter().collect(),
            encodings_ffn: EncodingKind::ALL.into_iter().collect(),
            widths: WidthFactor::ALL.into_iter().collect(),
        }
    }

    /// S1: the full per-block space with all blocks tied together.
    pub fn s1() -> Self {
        SearchSpaceConfig {
            per_block: false,
            ..SearchSpaceConfig::full()
        }
    }

    /// S2: S1 with the activation fixed to ReLU.
    pub fn s2() -> Self {
        let mut c = SearchSpaceConfig::s1();
        c.activations = [ActivationKind::ReLU].into_iter().collect();
        c
    }

    /// S3: S2 with both encodings fixed to ordinary residual connections.
    pub fn s3() -> Self {
        let mut c = SearchSpaceConfig::s2();
        c.encodings_attn = [EncodingKind::Skip].into_iter().collect();
        c.encodings_ffn = [EncodingKind::Skip].into_iter().collect();
        c
    }

    /// S4: S3 with the width fixed to 4x and attention fixed to the scaled
    /// dot product — the single vanilla Transformer.
    pub fn s4() -> Self {
        let mut c = SearchSpaceConfig::s3();
        c.widths = [WidthFactor::Four].into_iter().collect();
        c.attention = [AttentionKind::Dot_Attn].into_iter().collect();
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention.is_empty()
            || self.activations.is_empty()
            || self.encodings_attn.is_empty()
            || self.encodings_ffn.is_empty()
            || self.widths.is_empty()
        {
            return Err(Error::config("every decision slot needs at least one candidate"));
        }
        Ok(())
    }

    /// Candidates per block: |enc_attn| * |enc_ffn| * |attn| * |act| * |k|.
    pub fn block_cardinality(&self) -> u128 {
        self.encodings_attn.len() as u128
            * self.encodings_ffn.len() as u128
            * self.attention.len() as u128
            * self.activations.len() as u128
            * self.widths.len() as u128
    }

    /// Exact number of distinct architectures for the given depth.
    pub fn cardinality(&self, num_blocks: usize) -> u128 {
        let per_block = self.block_cardinality();
        if self.per_block {
            let mut total: u128 = 1;
            for _ in 0..num_blocks {
                total = total
                    .checked_mul(per_block)
                    .expect("search space size overflows u128");
            }
            total
        } else {
            per_block
        }
    }

    /// True when every candidate set of `self` is contained in `other` and
    /// the block-tying regime matches.
    pub fn is_subset_of(&self, other: &SearchSpaceConfig) -> bool {
        self.per_block == other.per_block
            && self.attention.is_subset(&other.attention)
            && self.activations.is_subset(&other.activations)
            && self.encodings_attn.is_subset(&other.encodings_attn)
            && self.encodings_ffn.is_subset(&other.encodings_ffn)
            && self.widths.is_subset(&other.widths)
    }

    pub fn contains(&self, spec: &ArchitectureSpec) -> bool {
        let tied_ok = self.per_block
            || spec.blocks.windows(2).all(|w| w[0] == w[1]);
        tied_ok
            && spec.blocks.iter().all(|b| {
                self.encodings_attn.contains(&b.enc_attn)
                    && self.encodings_ffn.contains(&b.enc_ffn)
                    && self.attention.contains(&b.attn)
                    && self.activations.contains(&b.act)
                    && self.widths.contains(&b.k)
            })
    }
}

/// Parse an architecture file, reporting the offending path on failure.
pub fn parse_spec_file(path: &std::path::Path) -> Result<ArchitectureSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    ArchitectureSpec::from_json(&path.display().to_string(), &text)
}
