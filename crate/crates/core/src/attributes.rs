//! Objective attributes of a piece: tempo, time signature, key and
//! instrumentation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{EventKind, MidiFile, Mode, NoteList, TimeSignature, DEFAULT_TEMPO_US};

/// Krumhansl-Kessler major key profile.
pub const MAJOR_PROFILE: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
/// Krumhansl-Kessler minor key profile.
pub const MINOR_PROFILE: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

pub const PITCH_CLASS_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttributeError {
    #[error("no non-drum notes to analyze")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key {
    pub tonic: u8,
    pub mode: Mode,
}

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        Self {
            tonic: tonic % 12,
            mode,
        }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", PITCH_CLASS_NAMES[self.tonic as usize], mode)
    }
}

impl FromStr for Key {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tonic, mode) = s
            .trim()
            .split_once(' ')
            .ok_or_else(|| format!("bad key {s:?}"))?;
        let tonic = PITCH_CLASS_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(tonic))
            .ok_or_else(|| format!("bad tonic {tonic:?}"))? as u8;
        let mode = match mode.trim().to_ascii_lowercase().as_str() {
            "major" => Mode::Major,
            "minor" => Mode::Minor,
            other => return Err(format!("bad mode {other:?}")),
        };
        Ok(Key { tonic, mode })
    }
}

impl Serialize for Key {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyEstimate {
    pub key: Key,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    pub bpm: f64,
    pub time_signature: String,
    pub key: Key,
    pub instruments: Vec<String>,
}

/// Extract all four attributes. Fails only when the piece has no non-drum
/// notes to estimate a key from.
pub fn analyze(file: &MidiFile) -> Result<AttributeSet, AttributeError> {
    let notes = crate::midi::extract_notes(file);
    Ok(AttributeSet {
        bpm: extract_tempo(file),
        time_signature: extract_time_signature(file).to_string(),
        key: estimate_key(&notes)?.key,
        instruments: extract_instruments(&notes),
    })
}

/// Pick the value that covers the most ticks. Events at equal ticks are
/// ordered by value so the result does not depend on their file order; the
/// largest value at a tick is the one that stays in effect.
fn dominant<T: Copy + Ord + std::hash::Hash>(
    mut changes: Vec<(u64, T)>,
    default: T,
    end: u64,
) -> T {
    changes.sort();
    let mut segments: Vec<(u64, T)> = Vec::new();
    if changes.first().is_none_or(|c| c.0 > 0) {
        segments.push((0, default));
    }
    for (tick, value) in changes {
        match segments.last_mut() {
            Some(last) if last.0 == tick => last.1 = value,
            _ => segments.push((tick, value)),
        }
    }
    let mut weight: HashMap<T, (u64, u64)> = HashMap::new();
    for (i, &(start, value)) in segments.iter().enumerate() {
        let stop = segments.get(i + 1).map_or(end.max(start), |s| s.0);
        let entry = weight.entry(value).or_insert((0, start));
        entry.0 += stop - start;
    }
    // heaviest wins; ties go to the value that appeared first
    weight
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map_or(default, |(v, _)| v)
}

/// Duration-weighted dominant tempo in bpm; 120 when the file has no tempo events.
pub fn extract_tempo(file: &MidiFile) -> f64 {
    let changes: Vec<(u64, u32)> = file
        .tracks
        .iter()
        .flat_map(|t| &t.events)
        .filter_map(|e| match e.kind {
            EventKind::SetTempo {
                microseconds_per_quarter,
            } => Some((e.tick, microseconds_per_quarter)),
            _ => None,
        })
        .collect();
    let us = dominant(changes, DEFAULT_TEMPO_US, file.end_tick());
    (60e6 / us as f64).min(999.0)
}

/// Duration-weighted dominant time signature; 4/4 when none is present.
pub fn extract_time_signature(file: &MidiFile) -> TimeSignature {
    let changes: Vec<(u64, TimeSignature)> = file
        .tracks
        .iter()
        .flat_map(|t| &t.events)
        .filter_map(|e| match e.kind {
            EventKind::TimeSignature(ts) => Some((e.tick, ts)),
            _ => None,
        })
        .collect();
    dominant(changes, TimeSignature::COMMON, file.end_tick())
}

fn pearson(x: &[f64; 12], y: &[f64; 12]) -> f64 {
    let mx = x.iter().sum::<f64>() / 12.0;
    let my = y.iter().sum::<f64>() / 12.0;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..12 {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Duration-weighted pitch-class histogram of the non-drum notes.
pub fn pitch_class_histogram(notes: &NoteList) -> [f64; 12] {
    let mut hist = [0.0; 12];
    for n in notes.notes.iter().filter(|n| !n.is_drum) {
        hist[(n.pitch % 12) as usize] += n.duration as f64;
    }
    hist
}

/// Correlation of a pitch-class histogram with the profile of `key`.
pub fn key_correlation(hist: &[f64; 12], key: Key) -> f64 {
    let rotated: [f64; 12] = std::array::from_fn(|i| hist[(i + key.tonic as usize) % 12]);
    let profile = match key.mode {
        Mode::Major => &MAJOR_PROFILE,
        Mode::Minor => &MINOR_PROFILE,
    };
    pearson(&rotated, profile)
}

/// Krumhansl-Schmuckler key finding. Ties resolve to major before minor,
/// then to the lowest tonic; a flat histogram correlates 0 with every key.
pub fn estimate_key(notes: &NoteList) -> Result<KeyEstimate, AttributeError> {
    if notes.notes.iter().all(|n| n.is_drum) {
        return Err(AttributeError::EmptyInput);
    }
    let hist = pitch_class_histogram(notes);
    let mut best = KeyEstimate {
        key: Key::new(0, Mode::Major),
        correlation: f64::NEG_INFINITY,
    };
    for mode in [Mode::Major, Mode::Minor] {
        for tonic in 0..12 {
            let key = Key::new(tonic, mode);
            let r = key_correlation(&hist, key);
            if r > best.correlation {
                best = KeyEstimate {
                    key,
                    correlation: r,
                };
            }
        }
    }
    Ok(best)
}

/// Sorted, deduplicated General MIDI names of the sounding programs.
pub fn extract_instruments(notes: &NoteList) -> Vec<String> {
    let names: BTreeSet<&str> = notes
        .notes
        .iter()
        .map(|n| {
            if n.is_drum {
                "drums"
            } else {
                GM_PROGRAM_NAMES[n.program as usize & 0x7f]
            }
        })
        .collect();
    names.into_iter().map(str::to_string).collect()
}

/// General MIDI level-1 program names, lower case.
pub const GM_PROGRAM_NAMES: [&str; 128] = [
    "acoustic grand piano",
    "bright acoustic piano",
    "electric grand piano",
    "honky-tonk piano",
    "electric piano 1",
    "electric piano 2",
    "harpsichord",
    "clavinet",
    "celesta",
    "glockenspiel",
    "music box",
    "vibraphone",
    "marimba",
    "xylophone",
    "tubular bells",
    "dulcimer",
    "drawbar organ",
    "percussive organ",
    "rock organ",
    "church organ",
    "reed organ",
    "accordion",
    "harmonica",
    "tango accordion",
    "acoustic guitar (nylon)",
    "acoustic guitar (steel)",
    "electric guitar (jazz)",
    "electric guitar (clean)",
    "electric guitar (muted)",
    "overdriven guitar",
    "distortion guitar",
    "guitar harmonics",
    "acoustic bass",
    "electric bass (finger)",
    "electric bass (pick)",
    "fretless bass",
    "slap bass 1",
    "slap bass 2",
    "synth bass 1",
    "synth bass 2",
    "violin",
    "viola",
    "cello",
    "contrabass",
    "tremolo strings",
    "pizzicato strings",
    "orchestral harp",
    "timpani",
    "string ensemble 1",
    "string ensemble 2",
    "synth strings 1",
    "synth strings 2",
    "choir aahs",
    "voice oohs",
    "synth voice",
    "orchestra hit",
    "trumpet",
    "trombone",
    "tuba",
    "muted trumpet",
    "french horn",
    "brass section",
    "synth brass 1",
    "synth brass 2",
    "soprano sax",
    "alto sax",
    "tenor sax",
    "baritone sax",
    "oboe",
    "english horn",
    "bassoon",
    "clarinet",
    "piccolo",
    "flute",
    "recorder",
    "pan flute",
    "blown bottle",
    "shakuhachi",
    "whistle",
    "ocarina",
    "lead 1 (square)",
    "lead 2 (sawtooth)",
    "lead 3 (calliope)",
    "lead 4 (chiff)",
    "lead 5 (charang)",
    "lead 6 (voice)",
    "lead 7 (fifths)",
    "lead 8 (bass + lead)",
    "pad 1 (new age)",
    "pad 2 (warm)",
    "pad 3 (polysynth)",
    "pad 4 (choir)",
    "pad 5 (bowed)",
    "pad 6 (metallic)",
    "pad 7 (halo)",
    "pad 8 (sweep)",
    "fx 1 (rain)",
    "fx 2 (soundtrack)",
    "fx 3 (crystal)",
    "fx 4 (atmosphere)",
    "fx 5 (brightness)",
    "fx 6 (goblins)",
    "fx 7 (echoes)",
    "fx 8 (sci-fi)",
    "sitar",
    "banjo",
    "shamisen",
    "koto",
    "kalimba",
    "bagpipe",
    "fiddle",
    "shanai",
    "tinkle bell",
    "agogo",
    "steel drums",
    "woodblock",
    "taiko drum",
    "melodic tom",
    "synth drum",
    "reverse cymbal",
    "guitar fret noise",
    "breath noise",
    "seashore",
    "bird tweet",
    "telephone ring",
    "helicopter",
    "applause",
    "gunshot",
];
