use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EncoderError;

/// How caption and knowledge combine into the text feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Single-head cross-attention over the pooled caption and knowledge
    /// embeddings in both orders.
    #[default]
    CrossAttention,
    /// Encode `caption [SEP] knowledge` as one token stream.
    ConcatOnly,
    /// Ignore knowledge entirely.
    NoKnowledge,
}

impl FusionMode {
    pub fn uses_knowledge(self) -> bool {
        self != FusionMode::NoKnowledge
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::ConcatOnly => "concat_only",
            FusionMode::NoKnowledge => "no_knowledge",
        })
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cross_attention" | "crossattention" | "cross" => Ok(FusionMode::CrossAttention),
            "concat_only" | "concatonly" | "concat" => Ok(FusionMode::ConcatOnly),
            "no_knowledge" | "noknowledge" | "none" => Ok(FusionMode::NoKnowledge),
            other => Err(format!("unknown fusion mode {other:?}")),
        }
    }
}

/// Which row(s) of the text encoder output summarize a sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_proj: usize,
    /// Side length of the square input image.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub fusion_mode: FusionMode,
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Small sizes suited to CPU training.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_proj: 32,
            image_size: 32,
            channels: 3,
            patch_size: 8,
            max_text_len: 32,
            vocab_size,
            ffn_mult: 4,
            fusion_mode: FusionMode::CrossAttention,
            pooling: Pooling::Cls,
        }
    }

    /// ViT-B/16 + BERT-base sized dimensions; only used for shape checks.
    pub fn paper_scale(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            d_proj: 256,
            image_size: 384,
            channels: 3,
            patch_size: 16,
            max_text_len: 35,
            vocab_size,
            ffn_mult: 4,
            fusion_mode: FusionMode::CrossAttention,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must be at least 2".into());
        }
        if self.vocab_size < crate::knowledge_text::NUM_RESERVED {
            return bad("vocabulary smaller than the reserved ids".into());
        }
        if self.d_proj == 0 || self.ffn_mult == 0 || self.channels == 0 {
            return bad("zero-sized dimension".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}
