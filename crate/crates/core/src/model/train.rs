//! Cross-entropy loss, gradients over a batch, the learning-rate schedule
//! and the Adam update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::decoder::DecoderModel;
use super::encoder::{CaptionEmbedding, Encoder, TextEncoder};
use super::ops::{log_softmax_row, Mat};
use super::params::{DecoderParams, EncoderParams, ParamSet};
use super::ModelError;
use crate::remi::{TokenSequence, PAD_ID};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SplitMix64 over the parts; used to derive per-step and per-example seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Mean of `-log softmax(row)[target]` over rows whose target is not PAD.
/// Zero when every target is PAD.
pub fn cross_entropy(logits: &Mat, targets: &[u32]) -> f64 {
    let (sum, count, _) = cross_entropy_grad(logits, targets, 1.0);
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Summed loss, counted targets and `scale * d(sum)/d(logits)`; PAD rows
/// get a zero gradient.
pub fn cross_entropy_grad(logits: &Mat, targets: &[u32], scale: f64) -> (f64, usize, Mat) {
    assert_eq!(logits.nrows(), targets.len(), "one target per logits row");
    let mut grad = Mat::zeros(logits.raw_dim());
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        let logp = log_softmax_row(logits.row(i));
        sum -= logp[t as usize];
        count += 1;
        let mut g = grad.row_mut(i);
        g.assign(&logp.mapv(|v| scale * v.exp()));
        g[t as usize] -= scale;
    }
    (sum, count, grad)
}

/// What the decoder is conditioned on.
#[derive(Debug, Clone)]
pub enum Conditioning {
    /// Caption text run through the encoder.
    Text(String),
    /// A fixed embedding.
    Embedding(CaptionEmbedding),
}

#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: TokenSequence,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub decoder: DecoderParams,
    pub encoder: Option<EncoderParams>,
    /// Summed loss over counted targets.
    pub loss_sum: f64,
    pub tokens: usize,
}

impl Gradients {
    fn zeros(model: &DecoderModel, encoder: &Encoder, train_encoder: bool) -> Self {
        let encoder = match encoder {
            Encoder::Toy(e) if train_encoder => Some(e.params.zeros_like()),
            _ => None,
        };
        Gradients {
            decoder: model.params.zeros_like(),
            encoder,
            loss_sum: 0.0,
            tokens: 0,
        }
    }

    fn scale(&mut self, s: f64) {
        self.decoder.scale(s);
        if let Some(e) = &mut self.encoder {
            e.scale(s);
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }
}

/// Add the gradient of `scale * summed loss` for one example.
fn accumulate(
    model: &DecoderModel,
    encoder: &Encoder,
    ex: &Example,
    dropout: Option<&mut ChaCha8Rng>,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(), ModelError> {
    let ids = &ex.tokens.ids;
    if ids.len() < 2 {
        return Ok(());
    }
    let n = (ids.len() - 1).min(model.config.context_length);
    let (inputs, targets) = (&ids[..n], &ids[1..=n]);

    let (h, toy_cache) = match (&ex.conditioning, encoder, grads.encoder.is_some()) {
        (Conditioning::Embedding(h), _, _) => (h.clone(), None),
        (Conditioning::Text(t), Encoder::Toy(toy), true) => {
            let (data, cache) = toy.forward_cached(t)?;
            (CaptionEmbedding::new(data), Some(cache))
        }
        (Conditioning::Text(t), enc, _) => (enc.encode_text(t)?, None),
    };
    let (logits, cache) = model.forward_cached(inputs, &h, dropout)?;
    let (sum, count, dlogits) = cross_entropy_grad(&logits, targets, scale);
    grads.loss_sum += sum;
    grads.tokens += count;
    let dh = model.backward(&cache, &dlogits, &h, &mut grads.decoder);
    if let (Some(cache), Encoder::Toy(toy), Some(eg)) = (toy_cache, encoder, grads.encoder.as_mut())
    {
        toy.backward(&cache, &dh, eg);
    }
    Ok(())
}

/// Gradient of the mean loss over the batch (no dropout).
pub fn backward(
    model: &DecoderModel,
    encoder: &Encoder,
    batch: &[Example],
) -> Result<Gradients, ModelError> {
    backward_scaled(model, encoder, false, batch, 1.0)
}

/// Gradient of `scale * mean loss`; encoder gradients only when
/// `train_encoder` is set and the encoder is trainable.
pub fn backward_scaled(
    model: &DecoderModel,
    encoder: &Encoder,
    train_encoder: bool,
    batch: &[Example],
    scale: f64,
) -> Result<Gradients, ModelError> {
    let mut grads = Gradients::zeros(model, encoder, train_encoder);
    for ex in batch {
        accumulate(model, encoder, ex, None, scale, &mut grads)?;
    }
    if grads.tokens > 0 {
        grads.scale(1.0 / grads.tokens as f64);
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub train_encoder: bool,
    pub m: DecoderParams,
    pub v: DecoderParams,
    pub encoder_m: Option<EncoderParams>,
    pub encoder_v: Option<EncoderParams>,
}

impl TrainState {
    pub fn new(
        model: &DecoderModel,
        encoder: &Encoder,
        base_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
        seed: u64,
        train_encoder: bool,
    ) -> Self {
        let (encoder_m, encoder_v) = match encoder {
            Encoder::Toy(e) if train_encoder => {
                (Some(e.params.zeros_like()), Some(e.params.zeros_like()))
            }
            _ => (None, None),
        };
        TrainState {
            step: 0,
            base_lr,
            warmup_steps,
            total_steps,
            seed,
            train_encoder,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            encoder_m,
            encoder_v,
        }
    }
}

/// Linear warm-up to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(state: &TrainState, step: u64) -> f64 {
    let (w, t) = (state.warmup_steps, state.total_steps);
    let step = step.min(t.max(w));
    if step <= w {
        return if w == 0 {
            state.base_lr
        } else {
            state.base_lr * step as f64 / w as f64
        };
    }
    if t <= w {
        return state.base_lr;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    state.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn adam<P: ParamSet>(params: &mut P, grads: &P, m: &mut P, v: &mut P, lr: f64, t: u64) {
    let g = grads.slices();
    let mut ms: Vec<Vec<f64>> = m.slices().iter().map(|s| s.to_vec()).collect();
    let mut vs: Vec<Vec<f64>> = v.slices().iter().map(|s| s.to_vec()).collect();
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        for (j, pj) in p.iter_mut().enumerate() {
            let gj = g[i][j];
            let mj = BETA1 * ms[i][j] + (1.0 - BETA1) * gj;
            let vj = BETA2 * vs[i][j] + (1.0 - BETA2) * gj * gj;
            ms[i][j] = mj;
            vs[i][j] = vj;
            *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
        }
        i += 1;
    });
    let mut k = 0;
    m.visit_mut(&mut |_, d| {
        d.copy_from_slice(&ms[k]);
        k += 1;
    });
    k = 0;
    v.visit_mut(&mut |_, d| {
        d.copy_from_slice(&vs[k]);
        k += 1;
    });
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean loss over the targets of all micro-batches, before the update.
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
}

/// One optimizer update from `micro_batches`. Per-example gradients are
/// summed in order across all micro-batches and divided by the total target
/// count, so k micro-batches give the same update as their concatenation.
/// Dropout masks are seeded from (seed, step, example index).
pub fn train_step(
    model: &mut DecoderModel,
    encoder: &mut Encoder,
    state: &mut TrainState,
    micro_batches: &[Vec<Example>],
) -> Result<StepReport, ModelError> {
    if micro_batches.iter().all(|b| b.is_empty()) {
        return Err(ModelError::InvalidConfig("empty batch".into()));
    }
    let t = state.step + 1;
    let mut grads = Gradients::zeros(model, encoder, state.train_encoder);
    for (e, ex) in micro_batches.iter().flatten().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[state.seed, t, e as u64]));
        accumulate(model, encoder, ex, Some(&mut rng), 1.0, &mut grads)?;
    }
    let loss = grads.mean_loss();
    if grads.tokens > 0 {
        grads.scale(1.0 / grads.tokens as f64);
    }
    let lr = cosine_lr(state, t);
    adam(
        &mut model.params,
        &grads.decoder,
        &mut state.m,
        &mut state.v,
        lr,
        t,
    );
    if let (Encoder::Toy(toy), Some(g), Some(m), Some(v)) = (
        encoder,
        grads.encoder.as_ref(),
        state.encoder_m.as_mut(),
        state.encoder_v.as_mut(),
    ) {
        adam(&mut toy.params, g, m, v, lr, t);
    }
    state.step = t;
    Ok(StepReport {
        step: t,
        loss,
        lr,
        tokens: grads.tokens,
    })
}
