//! Autoregressive sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::DecoderModel;
use super::encoder::CaptionEmbedding;
use super::ModelError;
use crate::remi::{TokenSequence, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// Total length including BOS.
    pub max_tokens: usize,
    /// Zero or below means greedy decoding.
    pub temperature: f64,
    /// Zero keeps the whole vocabulary.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            temperature: 1.0,
            top_k: 40,
            seed: 0,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable: equal logits keep the lower id first
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let max = row[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((row[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("non-empty vocabulary")
}

/// Start from BOS and extend one token at a time until EOS or `max_tokens`.
pub fn generate(
    model: &DecoderModel,
    h: &CaptionEmbedding,
    params: &SamplingParams,
) -> Result<TokenSequence, ModelError> {
    if params.max_tokens > model.config.context_length {
        return Err(ModelError::ContextOverflow {
            len: params.max_tokens,
            max: model.config.context_length,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ids = vec![BOS_ID];
    while ids.len() < params.max_tokens {
        let logits = model.forward(&TokenSequence::new(ids.clone()), h)?;
        let last = logits.row(logits.nrows() - 1);
        let row = last.as_slice().expect("contiguous row");
        let next = if params.temperature <= 0.0 {
            argmax(row)
        } else {
            sample(row, params.temperature, params.top_k, &mut rng)
        } as u32;
        ids.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(TokenSequence::new(ids))
}
