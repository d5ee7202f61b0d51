use serde::{Deserialize, Serialize};

use crate::bytes_tok::VOCAB_SIZE;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Fixed one-hot byte vectors, no learned embedding table.
    OneHot,
    /// A learned `vocab × d_model` table shared by encoder input, decoder
    /// input and the output projection.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    /// n-gram convolutional fusion after a shallow encoder.
    Ncf,
    /// Word-span block-masked self-attention in the lower layers.
    Wsf,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one_hot" => Ok(Self::OneHot),
            "dense" => Ok(Self::Dense),
            other => Err(format!("unknown embedding mode {other:?} (one_hot|dense)")),
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "ncf" => Ok(Self::Ncf),
            "wsf" => Ok(Self::Wsf),
            other => Err(format!("unknown fusion {other:?} (none|ncf|wsf)")),
        }
    }
}

/// Architecture hyperparameters. Defaults are the base configuration:
/// 6+6 layers, 512 hidden units, 2048 feed-forward, 8 heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub embedding: EmbeddingMode,
    pub fusion: FusionKind,
    /// Shallow encoder layers before n-gram fusion.
    pub shallow_layers: usize,
    /// Block-masked encoder layers for word fusion.
    pub word_layers: usize,
    pub vocab: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            ffn_dim: 2048,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            dropout: 0.1,
            embedding: EmbeddingMode::OneHot,
            fusion: FusionKind::None,
            shallow_layers: 1,
            word_layers: 4,
            vocab: VOCAB_SIZE,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive".into());
        }
        if self.vocab < VOCAB_SIZE {
            return fail(format!(
                "vocab {} smaller than the byte vocabulary {VOCAB_SIZE}",
                self.vocab
            ));
        }
        if self.embedding == EmbeddingMode::OneHot && self.vocab > self.d_model {
            return fail(format!(
                "one-hot embeddings need vocab {} <= d_model {}",
                self.vocab, self.d_model
            ));
        }
        if self.shallow_layers > self.enc_layers {
            return fail(format!(
                "shallow_layers {} exceeds enc_layers {}",
                self.shallow_layers, self.enc_layers
            ));
        }
        if self.word_layers > self.enc_layers {
            return fail(format!(
                "word_layers {} exceeds enc_layers {}",
                self.word_layers, self.enc_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Same architecture (everything that determines parameter shapes and
    /// forward semantics), ignoring dropout.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        let strip = |c: &ModelConfig| ModelConfig {
            dropout: 0.0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
