use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind};
use crate::error::{DssError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// TS-Conformer blocks with quadratic relation-aware attention.
    BaselineQuadratic,
    /// TS-Conformer blocks with linear attention and rotary positions.
    ProposedLinear,
    /// Encoder and decoders only; both heads read the encoder output.
    EncDecOnly,
    /// Pre-norm transformer stages with rotary softmax attention.
    Roformer,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaselineQuadratic,
        Variant::ProposedLinear,
        Variant::EncDecOnly,
        Variant::Roformer,
    ];

    pub fn attention_kind(self) -> AttentionKind {
        match self {
            Variant::BaselineQuadratic => AttentionKind::QuadraticRsa,
            Variant::ProposedLinear | Variant::EncDecOnly => AttentionKind::LinearRsa,
            Variant::Roformer => AttentionKind::RopeSoftmaxQuadratic,
        }
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            Variant::BaselineQuadratic => "baseline",
            Variant::ProposedLinear => "proposed",
            Variant::EncDecOnly => "encdec",
            Variant::Roformer => "roformer",
        }
    }

    pub fn from_short_name(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.short_name() == s)
            .ok_or_else(|| DssError::Config(format!("unknown variant '{s}' (expected baseline, proposed, encdec or roformer)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub fft: usize,
    pub hop: usize,
    pub compress_exp: f64,
    pub depthwise_kernel: usize,
    pub densenet_dilations: Vec<usize>,
    pub max_rel_distance: usize,
    pub rope_base: f64,
    /// Hidden width of feed-forward layers as a multiple of `channels`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full(Variant::ProposedLinear)
    }
}

impl ModelConfig {
    /// Full-size configuration of a variant.
    pub fn full(variant: Variant) -> Self {
        ModelConfig {
            variant,
            channels: 48,
            blocks: 4,
            heads: 4,
            fft: 512,
            hop: 128,
            compress_exp: 0.3,
            depthwise_kernel: 15,
            densenet_dilations: vec![1, 2, 4, 8],
            max_rel_distance: 64,
            rope_base: 10_000.0,
            ffn_mult: 4,
        }
    }

    /// Small configuration for smoke and overfit runs.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            channels: 16,
            blocks: 1,
            ..ModelConfig::full(variant)
        }
    }

    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    /// Frequency bins after the encoder's stride-2 reduction.
    pub fn reduced_bins(&self) -> usize {
        self.fft / 4
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Number of conformer/transformer blocks actually built.
    pub fn active_blocks(&self) -> usize {
        if self.variant == Variant::EncDecOnly {
            0
        } else {
            self.blocks
        }
    }

    /// Block whose output feeds the near head (0 = encoder output).
    pub fn near_tap(&self) -> usize {
        let b = self.active_blocks();
        if b == 0 {
            0
        } else {
            (b / 2).max(1)
        }
    }

    /// Block whose output feeds the far head.
    pub fn far_tap(&self) -> usize {
        self.active_blocks()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.channels,
            heads: self.heads,
            kind: self.variant.attention_kind(),
            max_rel_distance: self.max_rel_distance,
            rope_base: self.rope_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DssError::Config(m));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return err(format!("channels {} must be a positive multiple of heads {}", self.channels, self.heads));
        }
        if self.fft < 8 || !self.fft.is_power_of_two() {
            return err(format!("fft size {} must be a power of two >= 8", self.fft));
        }
        if self.hop == 0 || self.hop > self.fft {
            return err(format!("hop {} must be in 1..={}", self.hop, self.fft));
        }
        if !(self.compress_exp > 0.0 && self.compress_exp <= 1.0) {
            return err(format!("compress_exp {} must be in (0, 1]", self.compress_exp));
        }
        if self.depthwise_kernel % 2 == 0 {
            return err(format!("depthwise_kernel {} must be odd", self.depthwise_kernel));
        }
        if self.densenet_dilations.is_empty() || self.densenet_dilations.contains(&0) {
            return err("densenet_dilations must be non-empty and positive".into());
        }
        if self.variant != Variant::EncDecOnly && self.blocks == 0 {
            return err("blocks must be positive for this variant".into());
        }
        if self.ffn_mult == 0 {
            return err("ffn_mult must be positive".into());
        }
        self.attention().validate()
    }
}
