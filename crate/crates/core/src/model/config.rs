use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featgate::{Activation, GateVariant};
use crate::gla::{Algo, DEFAULT_CHUNK};
use crate::refattn::DEFAULT_ROPE_BASE;
use crate::swa::SwaConfig;

/// First token id after the 256 byte values.
pub const BOS: usize = 256;
pub const PAD: usize = 257;
/// Meta token ids start here.
pub const META_BASE: usize = 258;
/// Meta ids reserved in the default vocabulary, so models with different
/// meta counts can share one teacher.
pub const MAX_META_TOKENS: usize = 8;
/// Bytes, BOS, PAD and the reserved meta ids.
pub const DEFAULT_VOCAB: usize = META_BASE + MAX_META_TOKENS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub variant: GateVariant,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            variant: GateVariant::ScalarSigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlaConfig {
    pub algo: Algo,
    pub chunk_size: usize,
    pub normalize: bool,
}

impl Default for GlaConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Chunkwise,
            chunk_size: DEFAULT_CHUNK,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

/// Architecture of the teacher and of the student derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    /// Hedgehog projection width `f`; feature maps output `2f`.
    pub feature_dim: usize,
    pub activation: Activation,
    pub rope_base: f64,
    /// Student layers kept as full softmax attention.
    pub retain_full: Vec<usize>,
    /// Drop the sliding-window branch (`α` is fixed at zero).
    pub no_swa: bool,
    /// Replace every gate with 1.
    pub no_gate: bool,
    /// Compare stage-1 outputs after `W_O` instead of per head before it.
    pub mse_post_wo: bool,
    pub swa: SwaConfig,
    pub gate: GateConfig,
    pub gla: GlaConfig,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let swa = SwaConfig::default();
        Self {
            vocab: DEFAULT_VOCAB,
            d_model: 256,
            n_heads: 4,
            n_layers: 4,
            head_dim: 64,
            d_ff: 512,
            feature_dim: 64,
            activation: Activation::Softmax,
            rope_base: DEFAULT_ROPE_BASE,
            retain_full: Vec::new(),
            no_swa: false,
            no_gate: false,
            mse_post_wo: false,
            swa,
            gate: GateConfig::default(),
            gla: GlaConfig::default(),
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model {} != n_heads {} × head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim must be even for rotary embedding, got {}", self.head_dim));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.feature_dim == 0 || self.d_ff == 0 {
            return bad("layer, head, feature and ffn sizes must be positive".into());
        }
        if let Some(&i) = self.retain_full.iter().find(|&&i| i >= self.n_layers) {
            return bad(format!("retained layer {i} out of range 0..{}", self.n_layers));
        }
        if self.vocab < META_BASE + self.swa.meta_tokens {
            return bad(format!(
                "vocab {} too small for bytes, BOS, PAD and {} meta tokens",
                self.vocab, self.swa.meta_tokens
            ));
        }
        if self.gla.chunk_size == 0 {
            return bad("gla.chunk_size must be at least 1".into());
        }
        if self.lora.rank == 0 || !self.lora.alpha.is_finite() {
            return bad("lora.rank must be at least 1 and lora.alpha finite".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad(format!("rope_base must be finite and above 1, got {}", self.rope_base));
        }
        self.swa.validate()
    }

    pub fn is_retained(&self, layer: usize) -> bool {
        self.retain_full.contains(&layer)
    }

    /// Keep every other layer (the odd ones) as full attention.
    pub fn retain_half(&mut self) {
        self.retain_full = (0..self.n_layers).filter(|i| i % 2 == 1).collect();
    }

    /// Parses `--retain-full` values: `half` or a comma-separated index list.
    pub fn set_retain(&mut self, spec: &str) -> Result<()> {
        if spec == "half" {
            self.retain_half();
        } else if spec.is_empty() || spec == "none" {
            self.retain_full.clear();
        } else {
            self.retain_full = spec
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad layer index {s:?}")))
                })
                .collect::<Result<_>>()?;
        }
        self.validate()
    }

    pub fn meta_ids(&self) -> Vec<usize> {
        (0..self.swa.meta_tokens).map(|i| META_BASE + i).collect()
    }

    /// A configuration small enough for gradient checks.
    pub fn tiny() -> Self {
        let swa = SwaConfig::new(4, 2);
        Self {
            vocab: DEFAULT_VOCAB,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            head_dim: 8,
            d_ff: 24,
            feature_dim: 4,
            swa,
            gla: GlaConfig {
                chunk_size: 3,
                ..GlaConfig::default()
            },
            lora: LoraConfig { rank: 2, alpha: 4.0 },
            ..Self::default()
        }
    }
}
