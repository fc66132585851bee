//! Caption encoders producing the n×d matrix the decoder cross-attends to.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::ops::{
    attention, attention_backward, layer_norm, layer_norm_backward, sinusoidal_table, AttnCache,
};
use super::ops::{AttnGrads, AttnMask, AttnWeights, LnCache, Mat};
use super::params::EncoderParams;
use super::ModelError;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"MFEM";
pub const EMBEDDING_VERSION: u32 = 1;

/// Encoded caption: one row per caption token plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub data: Mat,
    pub mask: Vec<bool>,
}

impl CaptionEmbedding {
    pub fn new(data: Mat) -> Self {
        let mask = vec![true; data.nrows()];
        Self { data, mask }
    }

    pub fn with_mask(data: Mat, mask: Vec<bool>) -> Result<Self, ModelError> {
        if mask.len() != data.nrows() || data.nrows() == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "embedding has {} rows and {} mask entries",
                data.nrows(),
                mask.len()
            )));
        }
        Ok(Self { data, mask })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode_text(&self, caption: &str) -> Result<CaptionEmbedding, ModelError>;
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Key used by embedding files: FNV-1a of the caption's UTF-8 bytes.
pub fn caption_hash(caption: &str) -> u64 {
    fnv1a64(caption.as_bytes())
}

/// Lowercased alphanumeric runs; every other non-space character is a piece
/// of its own.
pub fn word_pieces(caption: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in caption.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    /// Size of the hashed word-piece table.
    pub pieces: usize,
    pub dim: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            pieces: 4096,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    pub params: EncoderParams,
}

pub(crate) struct ToyCache {
    ids: Vec<usize>,
    ln: LnCache,
    a: Mat,
    attn: AttnCache,
    out_ln: LnCache,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig, seed: u64) -> Self {
        Self {
            config,
            params: EncoderParams::init(config.pieces, config.dim, seed),
        }
    }

    pub fn piece_ids(&self, caption: &str) -> Vec<usize> {
        word_pieces(caption)
            .iter()
            .map(|p| (fnv1a64(p.as_bytes()) % self.config.pieces as u64) as usize)
            .collect()
    }

    fn weights(&self) -> AttnWeights<'_> {
        let p = &self.params;
        AttnWeights {
            q: &p.attn_q,
            k: &p.attn_k,
            v: &p.attn_v,
            o: &p.attn_o,
        }
    }

    pub(crate) fn forward_cached(&self, caption: &str) -> Result<(Mat, ToyCache), ModelError> {
        let ids = self.piece_ids(caption);
        if ids.is_empty() {
            return Err(ModelError::EmptyCaption);
        }
        let p = &self.params;
        let mut x = sinusoidal_table(ids.len(), self.config.dim);
        for (mut row, &id) in x.rows_mut().into_iter().zip(&ids) {
            row += &p.embedding.row(id);
        }
        let (a, ln) = layer_norm(&x, &p.ln_g, &p.ln_b);
        let (att, attn) = attention(&a, &a, &self.weights(), 1, AttnMask::None);
        let y = x + att;
        let (out, out_ln) = layer_norm(&y, &p.out_g, &p.out_b);
        Ok((
            out,
            ToyCache {
                ids,
                ln,
                a,
                attn,
                out_ln,
            },
        ))
    }

    pub(crate) fn backward(&self, cache: &ToyCache, dout: &Mat, g: &mut EncoderParams) {
        let p = &self.params;
        let dy = layer_norm_backward(dout, &cache.out_ln, &p.out_g, &mut g.out_g, &mut g.out_b);
        let grads = AttnGrads {
            q: &mut g.attn_q,
            k: &mut g.attn_k,
            v: &mut g.attn_v,
            o: &mut g.attn_o,
        };
        let (dq, dkv) =
            attention_backward(&dy, &cache.attn, &cache.a, &cache.a, &self.weights(), grads);
        let da = dq + dkv;
        let dx = dy + layer_norm_backward(&da, &cache.ln, &p.ln_g, &mut g.ln_g, &mut g.ln_b);
        for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
            let mut target = g.embedding.row_mut(id);
            target += &row;
        }
    }
}

impl TextEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_text(&self, caption: &str) -> Result<CaptionEmbedding, ModelError> {
        Ok(CaptionEmbedding::new(self.forward_cached(caption)?.0))
    }
}

/// Frozen embeddings read from a file, keyed by caption hash.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedEncoder {
    dim: usize,
    entries: HashMap<u64, Mat>,
}

impl PrecomputedEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    /// Store an embedding; values are rounded to f32 as they would be in a file.
    pub fn insert(&mut self, caption: &str, data: &Mat) -> Result<(), ModelError> {
        if data.ncols() != self.dim || data.nrows() == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "embedding {}x{} for a {}-dimensional encoder",
                data.nrows(),
                data.ncols(),
                self.dim
            )));
        }
        self.entries
            .insert(caption_hash(caption), data.mapv(|v| v as f32 as f64));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::EmbeddingFile(m.to_string());
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|_| bad("truncated header"))?;
        if head[..4] != EMBEDDING_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != EMBEDDING_VERSION {
            return Err(ModelError::IncompatibleVersion(version));
        }
        let (dim, count) = (word(8) as usize, word(12) as usize);
        if dim == 0 {
            return Err(bad("zero dimension"));
        }
        let mut entries = HashMap::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut rec = [0u8; 12];
            r.read_exact(&mut rec)
                .map_err(|_| bad("truncated record header"))?;
            let hash = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
            let n = u32::from_le_bytes(rec[8..].try_into().expect("4 bytes")) as usize;
            if n == 0 {
                return Err(bad("empty record"));
            }
            let mut raw = vec![0u8; n * dim * 4];
            r.read_exact(&mut raw)
                .map_err(|_| bad("truncated record"))?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            entries.insert(
                hash,
                Mat::from_shape_vec((n, dim), values).expect("shape matches length"),
            );
        }
        Ok(Self { dim, entries })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        let mut keys: Vec<&u64> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            let m = &self.entries[k];
            w.write_all(&k.to_le_bytes())?;
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            for v in m.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, caption: &str) -> Result<CaptionEmbedding, ModelError> {
        let hash = caption_hash(caption);
        self.entries
            .get(&hash)
            .map(|m| CaptionEmbedding::new(m.clone()))
            .ok_or(ModelError::MissingEmbedding(hash))
    }
}

/// Either encoder; what a checkpoint and the trainer carry around.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Toy(ToyEncoder),
    Precomputed(PrecomputedEncoder),
}

impl TextEncoder for Encoder {
    fn dim(&self) -> usize {
        match self {
            Encoder::Toy(e) => e.dim(),
            Encoder::Precomputed(e) => e.dim(),
        }
    }

    fn encode_text(&self, caption: &str) -> Result<CaptionEmbedding, ModelError> {
        match self {
            Encoder::Toy(e) => e.encode_text(caption),
            Encoder::Precomputed(e) => e.encode_text(caption),
        }
    }
}
