//! Text-conditioned autoregressive decoder over REMI+ tokens: caption
//! encoders, the transformer, training and sampling. Computation is in f64.

mod checkpoint;
mod decoder;
mod encoder;
mod generate;
pub mod ops;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use decoder::DecoderModel;
pub use encoder::{
    caption_hash, fnv1a64, word_pieces, CaptionEmbedding, Encoder, PrecomputedEncoder, TextEncoder,
    ToyEncoder, ToyEncoderConfig, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use generate::{generate, SamplingParams};
pub use params::{DecoderParams, EncoderParams, LayerParams, ParamSet};
pub use train::{
    backward, backward_scaled, cosine_lr, cross_entropy, cross_entropy_grad, mix_seed, train_step,
    Conditioning, Example, Gradients, StepReport, TrainState,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("caption has no word pieces")]
    EmptyCaption,
    #[error("no precomputed embedding for caption hash {0:016x}")]
    MissingEmbedding(u64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported format version {0}")]
    IncompatibleVersion(u32),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding file: {0}")]
    EmbeddingFile(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub encoder_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 64,
            ff_dim: 256,
            vocab_size,
            context_length: 256,
            encoder_dim: 64,
            dropout: 0.1,
        }
    }

    /// Decoder shape of the full-size model. The encoder width matches a
    /// FLAN-T5-base style encoder.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            layers: 18,
            heads: 8,
            model_dim: 768,
            ff_dim: 3072,
            vocab_size,
            context_length: 2048,
            encoder_dim: 768,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0
            || self.heads == 0
            || self.model_dim == 0
            || self.ff_dim == 0
            || self.encoder_dim == 0
        {
            return bad("dimensions must be positive");
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.context_length < 2 {
            return bad("context_length must be at least 2");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Trainable decoder parameters. The positional table is fixed and the
    /// caption encoder is counted separately.
    pub fn parameter_count(&self) -> usize {
        let (v, d, e, f) = (
            self.vocab_size,
            self.model_dim,
            self.encoder_dim,
            self.ff_dim,
        );
        let self_attn = 4 * d * d;
        let cross_attn = 2 * d * d + 2 * e * d;
        let feedforward = d * f + f + f * d + d;
        let norms = 3 * 2 * d;
        v * d + self.layers * (self_attn + cross_attn + feedforward + norms) + 2 * d + d * v
    }
}
