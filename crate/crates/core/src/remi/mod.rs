//! REMI+ tokenization: Bar / Position / Pitch / Velocity / Duration tokens,
//! extended with Tempo, TimeSig and Program tokens for multi-track pieces.

mod codec;
mod vocab;

use thiserror::Error;

pub use codec::{decode, encode, DecodeReport, Decoded, EncodeReport, Encoded};
pub use vocab::{Program, Token, VocabConfig, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

use crate::midi::{Note, NoteList};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemiError {
    #[error("invalid bin configuration: {0}")]
    InvalidBinConfig(String),
    #[error("vocabulary file: {0}")]
    VocabFile(String),
    #[error("line {line}: {message}")]
    TokenText { line: usize, message: String },
}

/// Encoded token ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keep the first `max_len` tokens; the tail (and its EOS) is dropped.
    pub fn truncated(&self, max_len: usize) -> TokenSequence {
        TokenSequence {
            ids: self.ids[..self.ids.len().min(max_len)].to_vec(),
        }
    }

    /// One token per line, `NAME` or `NAME_VALUE`.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for &id in &self.ids {
            match vocab.token(id) {
                Some(t) => out.push_str(&t.to_string()),
                None => out.push_str("UNK"),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<TokenSequence, RemiError> {
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let token: Token = line.parse().map_err(|message| RemiError::TokenText {
                line: i + 1,
                message,
            })?;
            let id = vocab.id(&token).ok_or_else(|| RemiError::TokenText {
                line: i + 1,
                message: format!("{token} is not in the vocabulary"),
            })?;
            ids.push(id);
        }
        Ok(TokenSequence { ids })
    }
}

pub fn tick_to_grid(tick: u64, tpq: u16, resolution: u32) -> u64 {
    let (tpq, res) = (tpq as u128, resolution as u128);
    ((tick as u128 * res * 2 + tpq) / (2 * tpq)) as u64
}

pub fn grid_to_tick(grid: u64, tpq: u16, resolution: u32) -> u64 {
    let (tpq, res) = (tpq as u128, resolution as u128);
    ((grid as u128 * tpq * 2 + res) / (2 * res)) as u64
}

/// Snap onsets and durations to the nearest grid point; durations are at
/// least one grid unit.
pub fn quantize(notes: &NoteList, resolution: u32) -> NoteList {
    assert!(resolution > 0, "position resolution must be positive");
    let tpq = notes.ticks_per_quarter;
    let snapped = notes
        .notes
        .iter()
        .map(|n| {
            let units = tick_to_grid(n.duration, tpq, resolution).max(1);
            Note {
                onset: grid_to_tick(tick_to_grid(n.onset, tpq, resolution), tpq, resolution),
                duration: grid_to_tick(units, tpq, resolution).max(1),
                ..*n
            }
        })
        .collect();
    NoteList::new(tpq, snapped)
}

impl Vocabulary {
    /// Quantize to the grid and snap velocity and duration to their bin
    /// values: exactly what survives an encode/decode cycle.
    pub fn representable(&self, notes: &NoteList) -> NoteList {
        let tpq = notes.ticks_per_quarter;
        let res = self.resolution();
        let snapped = quantize(notes, res)
            .notes
            .into_iter()
            .map(|n| {
                let units = tick_to_grid(n.duration, tpq, res);
                let units = self.duration_value(self.duration_bin(units)) as u64;
                Note {
                    duration: grid_to_tick(units, tpq, res).max(1),
                    velocity: self.velocity_value(self.velocity_bin(n.velocity)),
                    ..n
                }
            })
            .collect();
        NoteList::new(tpq, snapped)
    }
}
