//! Causal transformer backbone with fused event tokens and a handwritten
//! backward pass.
//!
//! Each token is the sum of an item-side part (collaborative ID row or the
//! shared OOV vector, plus a linear projection of the title's semantic
//! features) and one embedding per context field. Blocks are pre-norm with
//! tanh-GELU feed-forward layers and learned positional embeddings. When the
//! backbone width differs from the embedding width, linear adapters map in
//! and out so that embedding tables and the decoding head keep a fixed size
//! across a model-size ladder.

mod checkpoint;
mod embed;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderMode;
use crate::error::{config_err, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use embed::{embed_backward, embed_events, EventToken};
pub use params::{BlockParams, CountScope, GradSet, LayerNormParams, Linear, ParamSet, Scope, Tensor};
pub use transformer::{backward, forward, forward_extend, forward_with_cache, ForwardCache, HiddenStates};

/// Width reduction of the projected decoding head.
pub const PROJ_FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Arithmetic always runs in f64; `F32` keeps every stored parameter
    /// exactly representable as f32 so checkpoints round-trip bit-exactly.
    pub fn round_params(self, params: &mut ParamSet) {
        if self == Precision::F32 {
            params.for_each_mut(|_, _, t| {
                t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    /// Backbone hidden width `d`.
    pub width: usize,
    pub heads: usize,
    pub seq_len: usize,
    /// Number of catalog titles (rows of the ID table).
    pub vocab: usize,
    /// Width of embedding tables and of the decoder input. Equal to `width`
    /// unless a ladder pins it.
    pub embed_dim: usize,
    pub ffn_mult: usize,
    pub context_cards: Vec<usize>,
    /// Concatenated semantic feature width (graph + language + annotation).
    pub feature_dim: usize,
    pub z_dim: usize,
    pub decoder_mode: DecoderMode,
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk default: L=2, d=32, h=2, S=64, V=1000.
    pub fn desk(vocab: usize, feature_dim: usize, context_cards: Vec<usize>) -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 2,
            seq_len: 64,
            vocab,
            embed_dim: 32,
            ffn_mult: 4,
            context_cards,
            feature_dim,
            z_dim: 16,
            decoder_mode: DecoderMode::Projected,
            precision: Precision::F32,
        }
    }

    /// Width of user and title vectors in the scoring space.
    pub fn head_dim(&self) -> usize {
        match self.decoder_mode {
            DecoderMode::Full => self.embed_dim,
            DecoderMode::Projected => self.embed_dim / PROJ_FACTOR,
        }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return config_err("layers must be at least 1");
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return config_err(format!("width {} must be a positive multiple of heads {}", self.width, self.heads));
        }
        if self.decoder_mode == DecoderMode::Projected
            && (!self.embed_dim.is_multiple_of(PROJ_FACTOR) || self.embed_dim == 0)
        {
            return config_err(format!(
                "projected head needs embed_dim divisible by {PROJ_FACTOR}, got {}",
                self.embed_dim
            ));
        }
        if self.embed_dim == 0 {
            return config_err("embed_dim must be positive");
        }
        if self.seq_len < 2 {
            return config_err("seq_len must be at least 2");
        }
        if self.vocab == 0 {
            return config_err("vocab must be positive");
        }
        if self.ffn_mult == 0 || self.z_dim == 0 || self.feature_dim == 0 {
            return config_err("ffn_mult, z_dim and feature_dim must be positive");
        }
        if self.context_cards.contains(&0) {
            return config_err("context cardinalities must be positive");
        }
        Ok(())
    }
}

/// Exact element count of the tensors in `scope`, from shapes alone.
pub fn param_count(config: &ModelConfig, scope: CountScope) -> usize {
    let e = config.embed_dim;
    let d = config.width;
    let f = config.feature_dim;
    let dz = config.z_dim;
    let k = config.head_dim();
    let m = config.ffn_mult * d;

    let embeddings = config.vocab * e + e + f * e + config.context_cards.iter().sum::<usize>() * e
        + config.seq_len * e;
    let adapters = if d != e { (e * d + d) + (d * e + e) } else { 0 };
    let per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
    let backbone = adapters + config.layers * per_block + 2 * d;
    let head = match config.decoder_mode {
        DecoderMode::Projected => e * k + k,
        DecoderMode::Full => 0,
    };
    let decoding = head + (f * dz + dz) + ((e + dz) * e + e) + (e * k + k);

    match scope {
        CountScope::BackboneOnly => backbone,
        CountScope::Embeddings => embeddings,
        CountScope::Decoding => decoding,
        CountScope::Total => backbone + embeddings + decoding,
    }
}
