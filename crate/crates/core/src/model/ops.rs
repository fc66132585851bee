//! Forward and backward passes of the building blocks. Backward functions
//! accumulate parameter gradients into the buffers they are given.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `acc += a^T b`
pub fn add_at_b(acc: &mut Mat, a: &Mat, b: &Mat) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

pub struct LnCache {
    xhat: Mat,
    inv_std: Vector,
}

pub fn layer_norm(x: &Mat, gain: &Vector, bias: &Vector) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vector::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    gain: &Vector,
    dgain: &mut Vector,
    dbias: &mut Vector,
) -> Mat {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * gain;
    let mut dx = Mat::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let inv = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(&g)
            .and(&xh)
            .for_each(|o, &gv, &xv| {
                *o = inv * (gv - mean_g - xv * mean_gx);
            });
    }
    dx
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax restricted to `allowed(row, col)`; disallowed entries
/// are exactly zero.
fn masked_softmax(scores: &mut Mat, allowed: impl Fn(usize, usize) -> bool) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(i, j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Clone, Copy)]
pub enum AttnMask<'a> {
    /// Query i sees keys 0..=i.
    Causal,
    /// Every query sees the keys flagged valid.
    Keys(&'a [bool]),
    None,
}

impl AttnMask<'_> {
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Causal => j <= i,
            AttnMask::Keys(valid) => valid[j],
            AttnMask::None => true,
        }
    }
}

pub struct AttnWeights<'a> {
    pub q: &'a Mat,
    pub k: &'a Mat,
    pub v: &'a Mat,
    pub o: &'a Mat,
}

pub struct AttnGrads<'a> {
    pub q: &'a mut Mat,
    pub k: &'a mut Mat,
    pub v: &'a mut Mat,
    pub o: &'a mut Mat,
}

pub struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    concat: Mat,
}

/// Multi-head scaled dot-product attention with output projection.
/// `x_q` is L×D, `x_kv` is S×E; projections map to D.
pub fn attention(
    x_q: &Mat,
    x_kv: &Mat,
    w: &AttnWeights,
    heads: usize,
    mask: AttnMask,
) -> (Mat, AttnCache) {
    let q = x_q.dot(w.q);
    let k = x_kv.dot(w.k);
    let v = x_kv.dot(w.v);
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Mat::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        masked_softmax(&mut scores, |i, j| mask.allows(i, j));
        let out = scores.dot(&v.slice(cols));
        concat.slice_mut(cols).assign(&out);
        probs.push(scores);
    }
    let out = concat.dot(w.o);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Returns (d x_q, d x_kv).
pub fn attention_backward(
    dout: &Mat,
    cache: &AttnCache,
    x_q: &Mat,
    x_kv: &Mat,
    w: &AttnWeights,
    g: AttnGrads,
) -> (Mat, Mat) {
    add_at_b(g.o, &cache.concat, dout);
    let dconcat = dout.dot(&w.o.t());
    let d = cache.q.ncols();
    let heads = cache.probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(cache.q.raw_dim());
    let mut dk = Mat::zeros(cache.k.raw_dim());
    let mut dv = Mat::zeros(cache.v.raw_dim());
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h: ArrayView2<f64> = dconcat.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&cache.v.slice(cols).t());
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        let mut ds = &dp * p;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(&mut ds)
            .and(p)
            .and_broadcast(&row_dot.insert_axis(Axis(1)))
            .for_each(|o, &pv, &r| {
                *o -= pv * r;
            });
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    add_at_b(g.q, x_q, &dq);
    add_at_b(g.k, x_kv, &dk);
    add_at_b(g.v, x_kv, &dv);
    let dx_q = dq.dot(&w.q.t());
    let dx_kv = dk.dot(&w.k.t()) + dv.dot(&w.v.t());
    (dx_q, dx_kv)
}

/// Inverted dropout mask: entries are 0 or 1/(1-rate).
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    Mat::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Fixed sinusoidal position table, `rows × dim`.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((rows, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row-wise log-softmax.
pub fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vector {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}
