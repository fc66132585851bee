//! Binary checkpoints: magic, format version, a JSON header with the
//! configuration, then named little-endian f64 tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::decoder::DecoderModel;
use super::encoder::{ToyEncoder, ToyEncoderConfig};
use super::params::{DecoderParams, EncoderParams, ParamSet};
use super::train::TrainState;
use super::{ModelConfig, ModelError};

const MAGIC: [u8; 4] = *b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DecoderModel,
    /// `None` when the model was trained on precomputed embeddings.
    pub encoder: Option<ToyEncoder>,
    pub state: Option<TrainState>,
    /// Free-form strings, e.g. the vocabulary the model was trained with.
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn expect_vocab_size(&self, vocab_size: usize) -> Result<(), ModelError> {
        if self.model.config.vocab_size != vocab_size {
            return Err(ModelError::ShapeMismatch(format!(
                "checkpoint vocab_size {} but the vocabulary has {vocab_size} tokens",
                self.model.config.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    base_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
    seed: u64,
    train_encoder: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    encoder: Option<ToyEncoderConfig>,
    state: Option<StateHeader>,
    metadata: BTreeMap<String, String>,
}

fn write_tensors<P: ParamSet>(w: &mut impl Write, prefix: &str, params: &P) -> std::io::Result<()> {
    let mut result = Ok(());
    params.visit(&mut |name, shape, data| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let full = format!("{prefix}/{name}");
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
    });
    result
}

fn count_tensors<P: ParamSet>(p: &P) -> usize {
    p.names_and_shapes().len()
}

pub fn write_checkpoint(ck: &Checkpoint, mut w: impl Write) -> Result<(), ModelError> {
    let header = Header {
        model: ck.model.config.clone(),
        encoder: ck.encoder.as_ref().map(|e| e.config),
        state: ck.state.as_ref().map(|s| StateHeader {
            step: s.step,
            base_lr: s.base_lr,
            warmup_steps: s.warmup_steps,
            total_steps: s.total_steps,
            seed: s.seed,
            train_encoder: s.train_encoder,
        }),
        metadata: ck.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(&MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    let mut count = count_tensors(&ck.model.params);
    if let Some(e) = &ck.encoder {
        count += count_tensors(&e.params);
    }
    if let Some(s) = &ck.state {
        count += 2 * count_tensors(&s.m);
        count += s.encoder_m.as_ref().map_or(0, |m| 2 * count_tensors(m));
    }
    w.write_all(&(count as u32).to_le_bytes())?;
    write_tensors(&mut w, "decoder", &ck.model.params)?;
    if let Some(e) = &ck.encoder {
        write_tensors(&mut w, "encoder", &e.params)?;
    }
    if let Some(s) = &ck.state {
        write_tensors(&mut w, "adam_m", &s.m)?;
        write_tensors(&mut w, "adam_v", &s.v)?;
        if let (Some(m), Some(v)) = (&s.encoder_m, &s.encoder_v) {
            write_tensors(&mut w, "encoder_adam_m", m)?;
            write_tensors(&mut w, "encoder_adam_v", v)?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(ck, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Blob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn take_tensors<P: ParamSet>(
    blobs: &mut HashMap<String, Blob>,
    prefix: &str,
    template: &P,
) -> Result<P, ModelError> {
    let mut out = template.clone();
    let expected = template.names_and_shapes();
    for (name, shape) in &expected {
        let key = format!("{prefix}/{name}");
        match blobs.get(&key) {
            Some(b) if &b.shape == shape => {}
            Some(b) => {
                return Err(ModelError::ShapeMismatch(format!(
                    "{key}: stored {:?}, expected {:?}",
                    b.shape, shape
                )))
            }
            None => return Err(ModelError::ShapeMismatch(format!("{key} is missing"))),
        }
    }
    let mut i = 0;
    out.visit_mut(&mut |_, data| {
        let key = format!("{prefix}/{}", expected[i].0);
        data.copy_from_slice(&blobs.remove(&key).expect("checked above").data);
        i += 1;
    });
    Ok(out)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32, ModelError> {
        r.read_exact(&mut u32_buf)
            .map_err(|_| bad("truncated".into()))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated".into()))?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::IncompatibleVersion(version));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)
        .map_err(|_| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    header.model.validate()?;

    let count = read_u32(&mut r)?;
    let mut blobs = HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| bad("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| bad("truncated shape".into()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("{name}: truncated data")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blobs.insert(name, Blob { shape, data });
    }

    let template = DecoderParams::init(&header.model, 0);
    let params = take_tensors(&mut blobs, "decoder", &template)?;
    let model = DecoderModel::from_params(header.model.clone(), params)?;
    let encoder = match header.encoder {
        Some(cfg) => {
            let template = EncoderParams::init(cfg.pieces, cfg.dim, 0);
            Some(ToyEncoder {
                config: cfg,
                params: take_tensors(&mut blobs, "encoder", &template)?,
            })
        }
        None => None,
    };
    let state = match header.state {
        Some(s) => {
            let (encoder_m, encoder_v) = match &encoder {
                Some(e) if s.train_encoder => (
                    Some(take_tensors(&mut blobs, "encoder_adam_m", &e.params)?),
                    Some(take_tensors(&mut blobs, "encoder_adam_v", &e.params)?),
                ),
                _ => (None, None),
            };
            Some(TrainState {
                step: s.step,
                base_lr: s.base_lr,
                warmup_steps: s.warmup_steps,
                total_steps: s.total_steps,
                seed: s.seed,
                train_encoder: s.train_encoder,
                m: take_tensors(&mut blobs, "adam_m", &template)?,
                v: take_tensors(&mut blobs, "adam_v", &template)?,
                encoder_m,
                encoder_v,
            })
        }
        None => None,
    };
    if let Some(extra) = blobs.keys().next() {
        return Err(ModelError::ShapeMismatch(format!(
            "unexpected tensor {extra}"
        )));
    }
    if let Some(e) = &encoder {
        if e.config.dim != model.config.encoder_dim {
            return Err(ModelError::ShapeMismatch(
                "encoder width differs from encoder_dim".into(),
            ));
        }
    }
    Ok(Checkpoint {
        model,
        encoder,
        state,
        metadata: header.metadata,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    read_checkpoint(fs::read(path)?.as_slice())
}
