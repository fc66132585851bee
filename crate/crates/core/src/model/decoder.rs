//! Pre-LN transformer decoder with causal self-attention and cross-attention
//! over the caption embedding.

use rand_chacha::ChaCha8Rng;

use super::encoder::CaptionEmbedding;
use super::ops::{
    add_at_b, attention, attention_backward, dropout_mask, gelu, gelu_grad, layer_norm,
    layer_norm_backward, sinusoidal_table, AttnCache, AttnGrads, AttnMask, AttnWeights, LnCache,
    Mat,
};
use super::params::{DecoderParams, LayerParams, ParamSet};
use super::{ModelConfig, ModelError};
use crate::remi::TokenSequence;
use ndarray::Axis;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub params: DecoderParams,
    positional: Mat,
}

struct LayerCache {
    ln1: LnCache,
    a1: Mat,
    self_attn: AttnCache,
    m1: Option<Mat>,
    ln2: LnCache,
    a2: Mat,
    cross_attn: AttnCache,
    m2: Option<Mat>,
    ln3: LnCache,
    a3: Mat,
    pre: Mat,
    act: Mat,
    m3: Option<Mat>,
}

pub(crate) struct ForwardCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
    final_out: Mat,
}

fn self_weights(l: &LayerParams) -> AttnWeights<'_> {
    AttnWeights {
        q: &l.self_q,
        k: &l.self_k,
        v: &l.self_v,
        o: &l.self_o,
    }
}

fn cross_weights(l: &LayerParams) -> AttnWeights<'_> {
    AttnWeights {
        q: &l.cross_q,
        k: &l.cross_k,
        v: &l.cross_v,
        o: &l.cross_o,
    }
}

fn apply_dropout(x: Mat, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> (Mat, Option<Mat>) {
    match rng {
        Some(r) if rate > 0.0 => {
            let mask = dropout_mask(x.dim(), rate, r);
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

fn masked(d: &Mat, mask: &Option<Mat>) -> Mat {
    match mask {
        Some(m) => d * m,
        None => d.clone(),
    }
}

impl DecoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = DecoderParams::init(&config, seed);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: DecoderParams) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = DecoderParams::init(&config, 0).names_and_shapes();
        if params.names_and_shapes() != reference {
            return Err(ModelError::ShapeMismatch(
                "parameters do not match the configuration".into(),
            ));
        }
        let count = params.num_params();
        assert_eq!(
            count,
            config.parameter_count(),
            "closed-form parameter count disagrees with the tensors"
        );
        let positional = sinusoidal_table(config.context_length, config.model_dim);
        Ok(Self {
            config,
            params,
            positional,
        })
    }

    fn embed_scale(&self) -> f64 {
        (self.config.model_dim as f64).sqrt()
    }

    fn check_inputs(&self, ids: &[u32], h: &CaptionEmbedding) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_length {
            return Err(ModelError::ContextOverflow {
                len: ids.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        if h.dim() != self.config.encoder_dim
            || h.mask.len() != h.data.nrows()
            || h.data.nrows() == 0
        {
            return Err(ModelError::ShapeMismatch(format!(
                "caption embedding {}x{} for encoder_dim {}",
                h.data.nrows(),
                h.dim(),
                self.config.encoder_dim
            )));
        }
        Ok(())
    }

    /// Logits, one row per input position; row m scores the token at m+1.
    pub fn forward(&self, tokens: &TokenSequence, h: &CaptionEmbedding) -> Result<Mat, ModelError> {
        Ok(self.forward_cached(&tokens.ids, h, None)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        ids: &[u32],
        h: &CaptionEmbedding,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, ForwardCache), ModelError> {
        self.check_inputs(ids, h)?;
        let p = &self.params;
        let rate = self.config.dropout;
        let heads = self.config.heads;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let scale = self.embed_scale();
        let mut x = self
            .positional
            .slice(ndarray::s![..ids.len(), ..])
            .to_owned();
        for (mut row, &id) in x.rows_mut().into_iter().zip(&ids) {
            row.scaled_add(scale, &p.embedding.row(id));
        }

        let mut layers = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            let (a1, ln1) = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let (s1, self_attn) = attention(&a1, &a1, &self_weights(l), heads, AttnMask::Causal);
            let (s1, m1) = apply_dropout(s1, rate, &mut dropout);
            x += &s1;

            let (a2, ln2) = layer_norm(&x, &l.ln2_g, &l.ln2_b);
            let (s2, cross_attn) = attention(
                &a2,
                &h.data,
                &cross_weights(l),
                heads,
                AttnMask::Keys(&h.mask),
            );
            let (s2, m2) = apply_dropout(s2, rate, &mut dropout);
            x += &s2;

            let (a3, ln3) = layer_norm(&x, &l.ln3_g, &l.ln3_b);
            let pre = a3.dot(&l.ff1_w) + &l.ff1_b;
            let act = pre.mapv(gelu);
            let s3 = act.dot(&l.ff2_w) + &l.ff2_b;
            let (s3, m3) = apply_dropout(s3, rate, &mut dropout);
            x += &s3;

            layers.push(LayerCache {
                ln1,
                a1,
                self_attn,
                m1,
                ln2,
                a2,
                cross_attn,
                m2,
                ln3,
                a3,
                pre,
                act,
                m3,
            });
        }
        let (final_out, final_ln) = layer_norm(&x, &p.final_g, &p.final_b);
        let logits = final_out.dot(&p.output);
        Ok((
            logits,
            ForwardCache {
                ids,
                layers,
                final_ln,
                final_out,
            },
        ))
    }

    /// Accumulate parameter gradients for `dlogits` into `g`; returns the
    /// gradient with respect to the caption embedding.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Mat,
        h: &CaptionEmbedding,
        g: &mut DecoderParams,
    ) -> Mat {
        let p = &self.params;
        add_at_b(&mut g.output, &cache.final_out, dlogits);
        let dfinal = dlogits.dot(&p.output.t());
        let mut dx = layer_norm_backward(
            &dfinal,
            &cache.final_ln,
            &p.final_g,
            &mut g.final_g,
            &mut g.final_b,
        );
        let mut dh = Mat::zeros(h.data.raw_dim());

        for ((l, c), gl) in p
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(g.layers.iter_mut())
            .rev()
        {
            let ds3 = masked(&dx, &c.m3);
            gl.ff2_b += &ds3.sum_axis(Axis(0));
            add_at_b(&mut gl.ff2_w, &c.act, &ds3);
            let mut dpre = ds3.dot(&l.ff2_w.t());
            ndarray::Zip::from(&mut dpre)
                .and(&c.pre)
                .for_each(|d, &x| *d *= gelu_grad(x));
            gl.ff1_b += &dpre.sum_axis(Axis(0));
            add_at_b(&mut gl.ff1_w, &c.a3, &dpre);
            let da3 = dpre.dot(&l.ff1_w.t());
            dx += &layer_norm_backward(&da3, &c.ln3, &l.ln3_g, &mut gl.ln3_g, &mut gl.ln3_b);

            let ds2 = masked(&dx, &c.m2);
            let grads = AttnGrads {
                q: &mut gl.cross_q,
                k: &mut gl.cross_k,
                v: &mut gl.cross_v,
                o: &mut gl.cross_o,
            };
            let (da2, dh_l) = attention_backward(
                &ds2,
                &c.cross_attn,
                &c.a2,
                &h.data,
                &cross_weights(l),
                grads,
            );
            dh += &dh_l;
            dx += &layer_norm_backward(&da2, &c.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

            let ds1 = masked(&dx, &c.m1);
            let grads = AttnGrads {
                q: &mut gl.self_q,
                k: &mut gl.self_k,
                v: &mut gl.self_v,
                o: &mut gl.self_o,
            };
            let (dq, dkv) =
                attention_backward(&ds1, &c.self_attn, &c.a1, &c.a1, &self_weights(l), grads);
            let da1 = dq + dkv;
            dx += &layer_norm_backward(&da1, &c.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }

        let scale = self.embed_scale();
        for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
            g.embedding.row_mut(id).scaled_add(scale, &row);
        }
        dh
    }
}
