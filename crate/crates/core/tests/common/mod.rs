//! Seeded generators and brute-force oracles shared by the integration
//! tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use midiforge::attributes::{Key, MAJOR_PROFILE, MINOR_PROFILE};
use midiforge::eval::{EvalPair, Point, PointSet, Reference, Tec};
use midiforge::midi::{
    Event, EventKind, Format, MetaEvents, MidiFile,
    Mode::{self, Major, Minor},
    Note, NoteList, TimeSignature, Track,
};
use midiforge::remi::Vocabulary;
use rand::Rng;

fn random_event_kind(rng: &mut impl Rng) -> EventKind {
    let channel = rng.random_range(0..16);
    match rng.random_range(0..10) {
        0..=3 => EventKind::NoteOn {
            channel,
            pitch: rng.random_range(0..128),
            velocity: rng.random_range(1..128),
        },
        4..=6 => EventKind::NoteOff {
            channel,
            pitch: rng.random_range(0..128),
        },
        7 => EventKind::ProgramChange {
            channel,
            program: rng.random_range(0..128),
        },
        8 => match rng.random_range(0..3) {
            0 => EventKind::SetTempo {
                microseconds_per_quarter: rng.random_range(1..1 << 24),
            },
            1 => EventKind::TimeSignature(TimeSignature::new(
                rng.random_range(1..=255),
                1 << rng.random_range(0..8),
            )),
            _ => EventKind::KeySignature {
                sharps: rng.random_range(-7..=7),
                mode: if rng.random_bool(0.5) {
                    Mode::Major
                } else {
                    Mode::Minor
                },
            },
        },
        _ => EventKind::NoteOn {
            channel: 9,
            pitch: rng.random_range(35..82),
            velocity: rng.random_range(1..128),
        },
    }
}

/// A valid, normalized file: nondecreasing ticks and exactly one trailing
/// `EndOfTrack` per track.
pub fn random_midi(rng: &mut impl Rng) -> MidiFile {
    let format = if rng.random_bool(0.3) {
        Format::SingleTrack
    } else {
        Format::MultiTrack
    };
    let track_count = match format {
        Format::SingleTrack => 1,
        Format::MultiTrack => rng.random_range(1..=4),
    };
    let tracks = (0..track_count)
        .map(|_| {
            let mut tick = 0u64;
            let mut events: Vec<Event> = (0..rng.random_range(0..60))
                .map(|_| {
                    tick += match rng.random_range(0..10) {
                        0..=3 => 0,
                        4..=8 => rng.random_range(1..960),
                        _ => rng.random_range(960..1 << 21),
                    };
                    Event::new(tick, random_event_kind(rng))
                })
                .collect();
            let end = tick + rng.random_range(0..480);
            events.push(Event::new(end, EventKind::EndOfTrack));
            Track { events }
        })
        .collect();
    let mut file = MidiFile {
        format,
        ticks_per_quarter: rng.random_range(1..=0x7fff),
        tracks,
    };
    file.normalize();
    file
}

/// Ticks per quarter that are whole multiples of the grid, so every grid
/// point maps to an exact tick.
pub const GRID_ALIGNED_TPQ: [u16; 5] = [96, 120, 384, 480, 960];

/// Random notes snapped to what the vocabulary can represent, plus random
/// tempo and time-signature changes.
pub fn random_representable(rng: &mut impl Rng, vocab: &Vocabulary) -> (NoteList, MetaEvents) {
    let tpq = GRID_ALIGNED_TPQ[rng.random_range(0..GRID_ALIGNED_TPQ.len())];
    let span = tpq as u64 * rng.random_range(1..64);
    let programs: Vec<(u8, bool)> = (0..rng.random_range(1..=4))
        .map(|_| {
            if rng.random_bool(0.15) {
                (0, true)
            } else {
                (rng.random_range(0..128), false)
            }
        })
        .collect();
    let notes = (0..rng.random_range(0..80))
        .map(|_| {
            let (program, is_drum) = programs[rng.random_range(0..programs.len())];
            Note {
                onset: rng.random_range(0..span),
                duration: rng.random_range(1..tpq as u64 * 16),
                pitch: rng.random_range(0..128),
                velocity: rng.random_range(1..128),
                program,
                is_drum,
            }
        })
        .collect();
    let notes = vocab.representable(&NoteList::new(tpq, notes));

    let signatures = vocab.time_signatures();
    let mut meta = MetaEvents {
        tempos: vec![(0, rng.random_range(30.0..260.0))],
        time_signatures: vec![(0, signatures[rng.random_range(0..signatures.len())])],
    };
    for _ in 0..rng.random_range(0..4) {
        meta.tempos
            .push((rng.random_range(1..span), rng.random_range(30.0..260.0)));
    }
    for _ in 0..rng.random_range(0..3) {
        meta.time_signatures.push((
            rng.random_range(1..span),
            signatures[rng.random_range(0..signatures.len())],
        ));
    }
    meta.tempos.sort_by_key(|e| e.0);
    meta.time_signatures.sort_by_key(|e| e.0);
    (notes, meta)
}

/// Up to `max` distinct points in a small box, so repeated difference
/// vectors are common.
pub fn random_point_set(rng: &mut impl Rng, max: usize) -> PointSet {
    let n = rng.random_range(0..=max);
    let (w, h) = (rng.random_range(2..12), rng.random_range(2..12));
    let pts: BTreeSet<Point> = (0..n)
        .map(|_| Point::new(rng.random_range(0..w), rng.random_range(0..h)))
        .collect();
    PointSet::new(pts.into_iter().collect())
}

/// Every maximal translatable pattern, by definition: for each nonzero
/// vector `v` the set `{p : p + v in P}`, each expanded with every vector
/// that maps the whole pattern into `P`. Vectors pointing backwards give the
/// same patterns shifted, so only forward vectors are enumerated.
pub fn brute_force_tecs(set: &PointSet) -> Vec<Tec> {
    let pts = set.points();
    let mut patterns: BTreeSet<Vec<Point>> = BTreeSet::new();
    for a in pts {
        for b in pts {
            let v = *b - *a;
            if v <= Point::ZERO {
                continue;
            }
            let pattern: Vec<Point> = pts
                .iter()
                .copied()
                .filter(|&p| set.contains(&(p + v)))
                .collect();
            patterns.insert(pattern);
        }
    }
    patterns
        .into_iter()
        .map(|pattern| {
            let mut translators: Vec<Point> = pts
                .iter()
                .map(|&q| q - pattern[0])
                .filter(|&t| pattern.iter().all(|&p| set.contains(&(p + t))))
                .collect();
            translators.sort();
            Tec {
                pattern,
                translators,
            }
        })
        .collect()
}

/// A single-voice piece whose pitch-class durations are proportional to the
/// key's own profile, so profile correlation picks that key.
pub fn piece_in_key(key: Key, bpm: f64) -> MidiFile {
    let profile = match key.mode {
        Mode::Major => MAJOR_PROFILE,
        Mode::Minor => MINOR_PROFILE,
    };
    let mut onset = 0;
    let notes: Vec<Note> = (0..12)
        .map(|i| {
            let pc = (key.tonic as usize + i) % 12;
            let duration = (profile[i] * 240.0).round() as u64;
            let note = Note {
                onset,
                duration,
                pitch: 60 + pc as u8,
                velocity: 80,
                program: 0,
                is_drum: false,
            };
            onset += duration;
            note
        })
        .collect();
    let meta = MetaEvents {
        tempos: vec![(0, bpm)],
        time_signatures: vec![(0, TimeSignature::COMMON)],
    };
    MidiFile::from_notes(&NoteList::new(480, notes), &meta)
}

/// (generated bpm, generated key, reference bpm, reference key, TB, TBT, CK, CKD)
pub type Row = (f64, Key, f64, Key, bool, bool, bool, bool);

fn k(tonic: u8, mode: Mode) -> Key {
    Key::new(tonic, mode)
}

/// Ten crafted pairs with outcomes labeled by hand.
pub fn fixture_rows() -> Vec<Row> {
    vec![
        (
            120.0,
            k(0, Major),
            120.0,
            k(0, Major),
            true,
            true,
            true,
            true,
        ),
        (
            100.0,
            k(9, Minor),
            120.0,
            k(0, Major),
            false,
            true,
            false,
            true,
        ),
        (
            60.0,
            k(0, Major),
            59.9,
            k(0, Minor),
            false,
            true,
            false,
            false,
        ),
        (
            40.0,
            k(7, Major),
            39.9,
            k(7, Major),
            false,
            true,
            true,
            true,
        ),
        (
            210.0,
            k(4, Minor),
            150.0,
            k(7, Major),
            false,
            false,
            false,
            true,
        ),
        (
            75.0,
            k(2, Major),
            85.0,
            k(9, Major),
            true,
            true,
            false,
            false,
        ),
        (
            30.0,
            k(6, Minor),
            200.0,
            k(9, Major),
            false,
            false,
            false,
            true,
        ),
        (
            150.0,
            k(10, Major),
            139.0,
            k(10, Major),
            false,
            true,
            true,
            true,
        ),
        (65.0, k(1, Minor), 69.9, k(1, Minor), true, true, true, true),
        // the last reference is a MIDI file identical to the generation
        (90.0, k(3, Major), 90.0, k(3, Major), true, true, true, true),
    ]
}

/// TB, TBT, CK, CKD means over the rows above.
pub const FIXTURE_AGGREGATES: (f64, f64, f64, f64) = (0.4, 0.8, 0.5, 0.8);

pub fn fixture_pairs() -> Vec<EvalPair> {
    let rows = fixture_rows();
    rows.iter()
        .enumerate()
        .map(|(i, &(gb, gk, rb, rk, ..))| {
            let generated = piece_in_key(gk, gb);
            let reference = if i == rows.len() - 1 {
                Reference::Midi(generated.clone())
            } else {
                Reference::Attributes { bpm: rb, key: rk }
            };
            EvalPair {
                id: format!("pair{i}"),
                generated,
                reference,
            }
        })
        .collect()
}
