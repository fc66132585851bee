//! Seeded synthetic corpora: short in-key pieces on the grid, their
//! attributes and captions, written as MIDI files plus a JSON-lines manifest.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attributes::{extract_instruments, extract_tempo, AttributeSet, Key};
use crate::captions::{random_pseudo_caption, render_pseudo_caption, Caption};
use crate::eval::tempo_bin;
use crate::midi::{write_midi, MetaEvents, MidiFile, Mode, Note, NoteList, TimeSignature};
use crate::model::mix_seed;
use crate::remi::grid_to_tick;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionPolicy {
    /// A pseudo caption with a template drawn per piece.
    Random,
    /// Always the given template.
    Template(usize),
    /// One sentence naming the evaluation tempo bin.
    TempoBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub count: usize,
    /// Inclusive range of notes per piece.
    pub notes_per_piece: (usize, usize),
    /// Inclusive bpm range, used when `tempo_choices` is empty.
    pub tempo_range: (f64, f64),
    pub tempo_choices: Vec<f64>,
    pub keys: Vec<Key>,
    pub time_signatures: Vec<String>,
    pub programs: Vec<u8>,
    pub max_instruments: usize,
    pub captions: CaptionPolicy,
    pub ticks_per_quarter: u16,
    /// Onsets and durations are multiples of a quarter / resolution.
    pub resolution: u32,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        let keys = (0..12)
            .flat_map(|t| [Key::new(t, Mode::Major), Key::new(t, Mode::Minor)])
            .collect();
        Self {
            count: 50,
            notes_per_piece: (16, 40),
            tempo_range: (50.0, 180.0),
            tempo_choices: Vec::new(),
            keys,
            time_signatures: ["4/4", "3/4", "2/4", "6/8"].map(String::from).to_vec(),
            // piano, violin, cello, flute, clarinet, trumpet, acoustic bass
            programs: vec![0, 40, 42, 73, 71, 56, 32],
            max_instruments: 3,
            captions: CaptionPolicy::Random,
            ticks_per_quarter: 480,
            resolution: 8,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
        let (lo, hi) = self.notes_per_piece;
        if lo == 0 || lo > hi {
            return bad("notes_per_piece must be a non-empty range of positive counts");
        }
        if self.tempo_choices.is_empty()
            && !(self.tempo_range.0 > 0.0 && self.tempo_range.0 <= self.tempo_range.1)
        {
            return bad("tempo_range must be positive and ordered");
        }
        if self
            .tempo_choices
            .iter()
            .any(|&t| t <= 0.0 || !t.is_finite())
        {
            return bad("tempo choices must be positive");
        }
        if self.keys.is_empty() || self.time_signatures.is_empty() || self.programs.is_empty() {
            return bad("keys, time_signatures and programs must be non-empty");
        }
        if self.max_instruments == 0 {
            return bad("max_instruments must be positive");
        }
        if self.programs.iter().any(|&p| p > 127) {
            return bad("programs are 0-127");
        }
        for ts in &self.time_signatures {
            ts.parse::<TimeSignature>()
                .map_err(|e| CorpusError::InvalidSpec(format!("{ts}: {e}")))?;
        }
        if self.ticks_per_quarter == 0 || self.resolution == 0 {
            return bad("ticks_per_quarter and resolution must be positive");
        }
        if let CaptionPolicy::Template(t) = self.captions {
            if t >= crate::captions::TEMPLATE_COUNT {
                return bad("template id out of range");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPiece {
    pub id: String,
    pub midi: MidiFile,
    pub attributes: AttributeSet,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub midi_path: String,
    pub caption: String,
    pub attributes: AttributeSet,
}

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR_SCALE: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
/// Scale-degree weights; tonic, third and fifth dominate so the key is clear.
const DEGREE_WEIGHTS: [f64; 7] = [6.0, 1.0, 4.0, 1.0, 4.0, 1.0, 0.5];
/// (grid units at resolution 8, weight)
const RHYTHMS: [(u64, f64); 5] = [(2, 1.0), (4, 4.0), (8, 4.0), (12, 1.0), (16, 2.0)];

const TEMPO_WORDS: [&str; 9] = [
    "extremely slow",
    "very slow",
    "slow",
    "moderately slow",
    "moderate",
    "lively",
    "fast",
    "very fast",
    "extremely fast",
];

/// Caption for the tempo-bin policy.
pub fn tempo_bin_caption(bpm: f64) -> String {
    let bin = tempo_bin(bpm);
    format!("A {} piece in tempo bin {bin}.", TEMPO_WORDS[bin])
}

fn weighted<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|x| x.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

fn register_center(program: u8) -> i32 {
    match program {
        32..=39 | 42..=43 | 58 => 43,
        0..=7 => 60,
        _ => 67,
    }
}

fn voice(
    rng: &mut ChaCha8Rng,
    key: Key,
    program: u8,
    count: usize,
    spec: &SyntheticCorpusSpec,
) -> Vec<Note> {
    let scale = match key.mode {
        Mode::Major => MAJOR_SCALE,
        Mode::Minor => MINOR_SCALE,
    };
    let degrees: Vec<(u8, f64)> = scale.iter().copied().zip(DEGREE_WEIGHTS).collect();
    let center = register_center(program);
    let base = center - (center - key.tonic as i32).rem_euclid(12);
    let unit = |g: u64| {
        grid_to_tick(
            g * spec.resolution as u64 / 8,
            spec.ticks_per_quarter,
            spec.resolution,
        )
    };
    let mut cursor = 0u64;
    let mut notes = Vec::with_capacity(count);
    for i in 0..count {
        if rng.random::<f64>() < 0.1 {
            cursor += unit(4);
        }
        let last = i + 1 == count;
        // phrases open and close on the tonic; the final note is held
        let interval = if i == 0 || last {
            0
        } else {
            weighted(rng, &degrees) as i32
        };
        let octave = rng.random_range(-1..=1);
        let pitch = (base + interval + 12 * octave).clamp(21, 108) as u8;
        let length = unit(if last { 16 } else { weighted(rng, &RHYTHMS) }).max(1);
        notes.push(Note {
            onset: cursor,
            duration: length,
            pitch,
            velocity: rng.random_range(50..=110),
            program,
            is_drum: false,
        });
        cursor += length;
    }
    notes
}

/// Piece `index` of the corpus; independent of every other index.
pub fn generate_piece(spec: &SyntheticCorpusSpec, index: usize) -> SyntheticPiece {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, index as u64]));
    let key = *spec.keys.choose(&mut rng).expect("non-empty keys");
    let ts: TimeSignature = spec
        .time_signatures
        .choose(&mut rng)
        .expect("non-empty")
        .parse()
        .expect("validated");
    let bpm = match spec.tempo_choices.choose(&mut rng) {
        Some(&t) => t,
        None => rng.random_range(spec.tempo_range.0..=spec.tempo_range.1),
    };
    let n_inst = rng.random_range(1..=spec.max_instruments.min(spec.programs.len()));
    let programs: Vec<u8> = spec
        .programs
        .choose_multiple(&mut rng, n_inst)
        .copied()
        .collect();
    let total = rng.random_range(spec.notes_per_piece.0..=spec.notes_per_piece.1);

    let mut notes = Vec::with_capacity(total);
    for (v, &program) in programs.iter().enumerate() {
        let share = total / n_inst + usize::from(v < total % n_inst);
        if share > 0 {
            notes.extend(voice(&mut rng, key, program, share, spec));
        }
    }
    let notes = NoteList::new(spec.ticks_per_quarter, notes);
    let meta = MetaEvents {
        tempos: vec![(0, bpm)],
        time_signatures: vec![(0, ts)],
    };
    let midi = MidiFile::from_notes(&notes, &meta);
    let attributes = AttributeSet {
        bpm: extract_tempo(&midi),
        time_signature: ts.to_string(),
        key,
        instruments: extract_instruments(&notes),
    };
    let caption = match spec.captions {
        CaptionPolicy::Random => {
            random_pseudo_caption(&attributes, mix_seed(&[spec.seed, index as u64, 1])).text
        }
        CaptionPolicy::Template(t) => render_pseudo_caption(&attributes, t).text,
        CaptionPolicy::TempoBin => Caption::new(tempo_bin_caption(attributes.bpm)).text,
    };
    SyntheticPiece {
        id: format!("piece_{index:05}"),
        midi,
        attributes,
        caption,
    }
}

pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<SyntheticPiece>, CorpusError> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_piece(spec, i)).collect())
}

/// Write `<id>.mid` files and the manifest into `dir`.
pub fn write_corpus(
    spec: &SyntheticCorpusSpec,
    dir: &Path,
) -> Result<Vec<ManifestEntry>, CorpusError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(spec.count);
    for piece in generate_corpus(spec)? {
        let midi_path = format!("{}.mid", piece.id);
        let bytes = write_midi(&piece.midi).map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
        fs::write(dir.join(&midi_path), bytes)?;
        entries.push(ManifestEntry {
            id: piece.id,
            midi_path,
            caption: piece.caption,
            attributes: piece.attributes,
        });
    }
    write_manifest(&entries, &dir.join(MANIFEST_FILE))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), CorpusError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(
            &serde_json::to_string(e).map_err(|e| CorpusError::InvalidSpec(e.to_string()))?,
        );
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
