use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RemiError;
use crate::midi::TimeSignature;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Program {
    Melodic(u8),
    Drums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Unk,
    Bar,
    Position(u16),
    Pitch(u8),
    Velocity(u8),
    Duration(u8),
    Tempo(u8),
    TimeSig(TimeSignature),
    Program(Program),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Bos => f.write_str("BOS"),
            Token::Eos => f.write_str("EOS"),
            Token::Unk => f.write_str("UNK"),
            Token::Bar => f.write_str("BAR"),
            Token::Position(p) => write!(f, "POSITION_{p}"),
            Token::Pitch(p) => write!(f, "PITCH_{p}"),
            Token::Velocity(v) => write!(f, "VELOCITY_{v}"),
            Token::Duration(d) => write!(f, "DURATION_{d}"),
            Token::Tempo(t) => write!(f, "TEMPO_{t}"),
            Token::TimeSig(ts) => write!(f, "TIMESIG_{ts}"),
            Token::Program(Program::Melodic(p)) => write!(f, "PROGRAM_{p}"),
            Token::Program(Program::Drums) => f.write_str("PROGRAM_DRUMS"),
        }
    }
}

impl FromStr for Token {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("unrecognized token {s:?}");
        let (name, value) = match s.split_once('_') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        let num = |v: Option<&str>| v.ok_or_else(bad)?.parse::<u16>().map_err(|_| bad());
        let small =
            |v: Option<&str>| -> Result<u8, String> { u8::try_from(num(v)?).map_err(|_| bad()) };
        Ok(match name {
            "PAD" if value.is_none() => Token::Pad,
            "BOS" if value.is_none() => Token::Bos,
            "EOS" if value.is_none() => Token::Eos,
            "UNK" if value.is_none() => Token::Unk,
            "BAR" if value.is_none() => Token::Bar,
            "POSITION" => Token::Position(num(value)?),
            "PITCH" => Token::Pitch(small(value)?),
            "VELOCITY" => Token::Velocity(small(value)?),
            "DURATION" => Token::Duration(small(value)?),
            "TEMPO" => Token::Tempo(small(value)?),
            "TIMESIG" => Token::TimeSig(value.ok_or_else(bad)?.parse()?),
            "PROGRAM" if value == Some("DRUMS") => Token::Program(Program::Drums),
            "PROGRAM" => Token::Program(Program::Melodic(small(value)?)),
            _ => return Err(bad()),
        })
    }
}

/// Binning and grid parameters from which a vocabulary is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    /// Grid positions per quarter note.
    pub position_resolution: u32,
    pub velocity_bins: u32,
    /// Representative bpm of each tempo bin, strictly increasing.
    pub tempo_bins: Vec<f64>,
    /// Durations in grid units, strictly increasing.
    pub duration_bins: Vec<u32>,
    pub time_signatures: Vec<String>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        let tempo_bins = (0..32)
            .map(|i| 40.0 * (250.0f64 / 40.0).powf(i as f64 / 31.0))
            .collect();
        let duration_bins = (1..=8)
            .chain((10..=32).step_by(2))
            .chain((36..=96).step_by(4))
            .collect();
        let time_signatures = [
            "2/2", "2/4", "3/4", "4/4", "5/4", "6/4", "3/8", "5/8", "6/8", "7/8", "9/8", "12/8",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            position_resolution: 8,
            velocity_bins: 32,
            tempo_bins,
            duration_bins,
            time_signatures,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    config: VocabConfig,
    time_signatures: Vec<TimeSignature>,
    velocity_values: Vec<u8>,
    max_positions: u16,
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    config: VocabConfig,
    tokens: Vec<String>,
}

const VOCAB_FORMAT_VERSION: u32 = 1;

impl Vocabulary {
    pub fn build(config: VocabConfig) -> Result<Self, RemiError> {
        let invalid = |msg: String| Err(RemiError::InvalidBinConfig(msg));
        if config.position_resolution == 0 || config.position_resolution > 480 {
            return invalid("position_resolution must be in 1..=480".into());
        }
        if !(1..=127).contains(&config.velocity_bins) {
            return invalid("velocity_bins must be in 1..=127".into());
        }
        if config.tempo_bins.is_empty()
            || config.tempo_bins.len() > 256
            || config
                .tempo_bins
                .iter()
                .any(|b| !b.is_finite() || *b <= 0.0)
            || config.tempo_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return invalid("tempo_bins must be positive and strictly increasing".into());
        }
        if config.duration_bins.is_empty()
            || config.duration_bins.len() > 256
            || config.duration_bins[0] == 0
            || config.duration_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return invalid("duration_bins must be positive and strictly increasing".into());
        }
        let mut time_signatures = Vec::new();
        for s in &config.time_signatures {
            let ts: TimeSignature = s.parse().map_err(RemiError::InvalidBinConfig)?;
            if !(4 * config.position_resolution).is_multiple_of(ts.denominator as u32) {
                return invalid(format!(
                    "time signature {ts} does not fall on the position grid"
                ));
            }
            if time_signatures.contains(&ts) {
                return invalid(format!("duplicate time signature {ts}"));
            }
            time_signatures.push(ts);
        }
        if time_signatures.is_empty() {
            return invalid("time_signatures must be non-empty".into());
        }

        let n = config.velocity_bins;
        let velocity_values = (0..n)
            .map(|i| {
                if n == 1 {
                    64
                } else {
                    1 + ((i as f64) * 126.0 / (n - 1) as f64).round() as u8
                }
            })
            .collect();
        let max_positions = time_signatures
            .iter()
            .map(|ts| bar_positions(*ts, config.position_resolution))
            .max()
            .unwrap_or(1) as u16;

        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Unk, Token::Bar];
        tokens.extend((0..max_positions).map(Token::Position));
        tokens.extend((0..128u8).map(Token::Pitch));
        tokens.extend((0..n as u8).map(Token::Velocity));
        tokens.extend((0..config.duration_bins.len()).map(|i| Token::Duration(i as u8)));
        tokens.extend((0..config.tempo_bins.len()).map(|i| Token::Tempo(i as u8)));
        tokens.extend(time_signatures.iter().map(|ts| Token::TimeSig(*ts)));
        tokens.extend((0..128u8).map(|p| Token::Program(Program::Melodic(p))));
        tokens.push(Token::Program(Program::Drums));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, i as u32))
            .collect();

        Ok(Self {
            config,
            time_signatures,
            velocity_values,
            max_positions,
            tokens,
            ids,
        })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn resolution(&self) -> u32 {
        self.config.position_resolution
    }

    pub fn max_positions(&self) -> u16 {
        self.max_positions
    }

    pub fn time_signatures(&self) -> &[TimeSignature] {
        &self.time_signatures
    }

    pub fn id(&self, token: &Token) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or UNK when the token is outside this vocabulary.
    pub fn id_or_unk(&self, token: &Token) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn velocity_bin(&self, velocity: u8) -> u8 {
        nearest(&self.velocity_values, |v| {
            (v as i32 - velocity as i32).unsigned_abs() as f64
        }) as u8
    }

    pub fn velocity_value(&self, bin: u8) -> u8 {
        self.velocity_values[bin as usize]
    }

    pub fn velocity_bin_count(&self) -> usize {
        self.velocity_values.len()
    }

    /// Tempo bin nearest to `bpm` in log space.
    pub fn tempo_bin(&self, bpm: f64) -> u8 {
        let target = bpm.max(1e-9).ln();
        nearest(&self.config.tempo_bins, |b| (b.ln() - target).abs()) as u8
    }

    pub fn tempo_value(&self, bin: u8) -> f64 {
        self.config.tempo_bins[bin as usize]
    }

    pub fn tempo_bin_count(&self) -> usize {
        self.config.tempo_bins.len()
    }

    pub fn duration_bin(&self, grid_units: u64) -> u8 {
        nearest(&self.config.duration_bins, |d| {
            (d as f64 - grid_units as f64).abs()
        }) as u8
    }

    pub fn duration_value(&self, bin: u8) -> u32 {
        self.config.duration_bins[bin as usize]
    }

    pub fn to_toml(&self) -> String {
        let file = VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            config: self.config.clone(),
            tokens: self.tokens.iter().map(|t| t.to_string()).collect(),
        };
        toml::to_string(&file).expect("vocabulary serializes")
    }

    /// Rebuild from a serialized vocabulary, checking the stored id map
    /// against the one implied by its config.
    pub fn from_toml(text: &str) -> Result<Self, RemiError> {
        let file: VocabFile =
            toml::from_str(text).map_err(|e| RemiError::VocabFile(e.to_string()))?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(RemiError::VocabFile(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let vocab = Self::build(file.config)?;
        let stored: Result<Vec<Token>, _> =
            file.tokens.iter().map(|s| s.parse::<Token>()).collect();
        let stored = stored.map_err(RemiError::VocabFile)?;
        if stored != vocab.tokens {
            return Err(RemiError::VocabFile(
                "token list does not match config".into(),
            ));
        }
        Ok(vocab)
    }
}

pub(crate) fn bar_positions(ts: TimeSignature, resolution: u32) -> u32 {
    ((ts.numerator as u32 * 4 * resolution) / ts.denominator as u32).max(1)
}

/// Index of the minimum-distance entry; ties go to the lower index.
fn nearest<T: Copy>(values: &[T], dist: impl Fn(T) -> f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        let d = dist(v);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}
