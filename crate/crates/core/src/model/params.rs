//! Parameter containers. Gradients and Adam moments reuse the same structs,
//! so every parameter-wise operation goes through the visitors below.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{Mat, Vector};
use super::ModelConfig;

const INIT_STD: f64 = 0.02;

/// Named tensors in a fixed order.
pub trait ParamSet: Clone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [usize], &'a [f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(&mut |_, data| data.fill(0.0));
        out
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, data| out.push(data));
        out
    }

    fn names_and_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, data| data.iter_mut().for_each(|v| *v *= s));
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.slices();
        let mut i = 0;
        self.visit_mut(&mut |_, data| {
            data.iter_mut().zip(src[i]).for_each(|(a, b)| *a += b);
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

macro_rules! visit_fields {
    ($ty:ty, [$($field:ident),* $(,)?]) => {
        impl $ty {
            fn visit_prefixed<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [usize], &'a [f64])) {
                $( f(&format!("{prefix}{}", stringify!($field)), self.$field.shape(),
                     self.$field.as_slice().expect("standard layout")); )*
            }
            fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
                $( f(&format!("{prefix}{}", stringify!($field)),
                     self.$field.as_slice_mut().expect("standard layout")); )*
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vector,
    pub ln1_b: Vector,
    pub self_q: Mat,
    pub self_k: Mat,
    pub self_v: Mat,
    pub self_o: Mat,
    pub ln2_g: Vector,
    pub ln2_b: Vector,
    pub cross_q: Mat,
    pub cross_k: Mat,
    pub cross_v: Mat,
    pub cross_o: Mat,
    pub ln3_g: Vector,
    pub ln3_b: Vector,
    pub ff1_w: Mat,
    pub ff1_b: Vector,
    pub ff2_w: Mat,
    pub ff2_b: Vector,
}

visit_fields!(
    LayerParams,
    [
        ln1_g, ln1_b, self_q, self_k, self_v, self_o, ln2_g, ln2_b, cross_q, cross_k, cross_v,
        cross_o, ln3_g, ln3_b, ff1_w, ff1_b, ff2_w, ff2_b,
    ]
);

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub embedding: Mat,
    pub layers: Vec<LayerParams>,
    pub final_g: Vector,
    pub final_b: Vector,
    pub output: Mat,
}

impl ParamSet for DecoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [usize], &'a [f64])) {
        f(
            "embedding",
            self.embedding.shape(),
            self.embedding.as_slice().expect("standard layout"),
        );
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_prefixed(&format!("layers.{i}."), f);
        }
        f(
            "final_g",
            self.final_g.shape(),
            self.final_g.as_slice().expect("standard layout"),
        );
        f(
            "final_b",
            self.final_b.shape(),
            self.final_b.as_slice().expect("standard layout"),
        );
        f(
            "output",
            self.output.shape(),
            self.output.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            "embedding",
            self.embedding.as_slice_mut().expect("standard layout"),
        );
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_prefixed_mut(&format!("layers.{i}."), f);
        }
        f(
            "final_g",
            self.final_g.as_slice_mut().expect("standard layout"),
        );
        f(
            "final_b",
            self.final_b.as_slice_mut().expect("standard layout"),
        );
        f(
            "output",
            self.output.as_slice_mut().expect("standard layout"),
        );
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| self.normal.sample(&mut self.rng))
    }
}

impl DecoderParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let (d, e, ff, v) = (cfg.model_dim, cfg.encoder_dim, cfg.ff_dim, cfg.vocab_size);
        let mut init = Init::new(seed);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Vector::ones(d),
                ln1_b: Vector::zeros(d),
                self_q: init.mat(d, d),
                self_k: init.mat(d, d),
                self_v: init.mat(d, d),
                self_o: init.mat(d, d),
                ln2_g: Vector::ones(d),
                ln2_b: Vector::zeros(d),
                cross_q: init.mat(d, d),
                cross_k: init.mat(e, d),
                cross_v: init.mat(e, d),
                cross_o: init.mat(d, d),
                ln3_g: Vector::ones(d),
                ln3_b: Vector::zeros(d),
                ff1_w: init.mat(d, ff),
                ff1_b: Vector::zeros(ff),
                ff2_w: init.mat(ff, d),
                ff2_b: Vector::zeros(d),
            })
            .collect();
        let embedding = init.mat(v, d);
        let output = init.mat(d, v);
        DecoderParams {
            embedding,
            layers,
            final_g: Vector::ones(d),
            final_b: Vector::zeros(d),
            output,
        }
    }
}

/// Parameters of the toy caption encoder: word-piece embedding, one pre-LN
/// single-head self-attention block and a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Mat,
    pub ln_g: Vector,
    pub ln_b: Vector,
    pub attn_q: Mat,
    pub attn_k: Mat,
    pub attn_v: Mat,
    pub attn_o: Mat,
    pub out_g: Vector,
    pub out_b: Vector,
}

visit_fields!(
    EncoderParams,
    [embedding, ln_g, ln_b, attn_q, attn_k, attn_v, attn_o, out_g, out_b]
);

impl ParamSet for EncoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [usize], &'a [f64])) {
        self.visit_prefixed("", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_prefixed_mut("", f);
    }
}

impl EncoderParams {
    pub fn init(pieces: usize, dim: usize, seed: u64) -> Self {
        let mut init = Init::new(seed);
        EncoderParams {
            embedding: init.mat(pieces, dim),
            ln_g: Vector::ones(dim),
            ln_b: Vector::zeros(dim),
            attn_q: init.mat(dim, dim),
            attn_k: init.mat(dim, dim),
            attn_v: init.mat(dim, dim),
            attn_o: init.mat(dim, dim),
            out_g: Vector::ones(dim),
            out_b: Vector::zeros(dim),
        }
    }
}
