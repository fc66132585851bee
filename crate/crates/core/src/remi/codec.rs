use std::collections::BTreeMap;

use super::vocab::{bar_positions, Program, Token, Vocabulary, BOS_ID, EOS_ID};
use super::{grid_to_tick, tick_to_grid, TokenSequence};
use crate::midi::{MetaEvents, Note, NoteList, TimeSignature};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EncodeReport {
    /// Values that fell outside the vocabulary and were emitted as UNK.
    pub unmappable: usize,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub tokens: TokenSequence,
    pub report: EncodeReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeReport {
    /// Tokens skipped because they broke the emission grammar.
    pub violations: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub notes: NoteList,
    pub meta: MetaEvents,
    pub report: DecodeReport,
}

fn program_of(note: &Note) -> Program {
    if note.is_drum {
        Program::Drums
    } else {
        Program::Melodic(note.program)
    }
}

/// Encode a note list (already on the vocabulary grid) with its tempo and
/// time-signature changes.
///
/// Grammar: `BOS (Bar [TimeSig] (Position [Tempo] (Program Pitch Velocity Duration)*)*)* EOS`.
/// Time-signature changes take effect at the next bar line; tempo changes
/// snap to the nearest grid position.
pub fn encode(notes: &NoteList, meta: &MetaEvents, vocab: &Vocabulary) -> Encoded {
    let tpq = notes.ticks_per_quarter;
    let res = vocab.resolution();
    let mut report = EncodeReport::default();

    // (grid onset, on-grid flag, note)
    let mut placed: Vec<(u64, bool, &Note)> = notes
        .notes
        .iter()
        .map(|n| {
            let g = tick_to_grid(n.onset, tpq, res);
            (g, grid_to_tick(g, tpq, res) == n.onset, n)
        })
        .collect();
    placed.sort_by_key(|&(g, _, n)| (g, program_of(n), n.pitch, n.duration, n.velocity));

    let mut ts_events: Vec<(u64, TimeSignature)> = meta.time_signatures.clone();
    ts_events.sort_by_key(|e| e.0);
    let mut initial_ts = TimeSignature::COMMON;
    let mut pending_ts = Vec::new();
    for (tick, ts) in ts_events {
        if tick == 0 {
            initial_ts = ts;
        } else {
            pending_ts.push((tick_to_grid(tick, tpq, res), ts));
        }
    }

    let mut tempo_events: Vec<(u64, f64)> = meta.tempos.clone();
    tempo_events.sort_by_key(|e| e.0);
    let mut tempo_changes: BTreeMap<u64, u8> = BTreeMap::new();
    let initial_bpm = tempo_events
        .iter()
        .take_while(|e| e.0 == 0)
        .last()
        .map_or(120.0, |e| e.1);
    tempo_changes.insert(0, vocab.tempo_bin(initial_bpm));
    for &(tick, bpm) in tempo_events.iter().filter(|e| e.0 > 0) {
        tempo_changes.insert(tick_to_grid(tick, tpq, res), vocab.tempo_bin(bpm));
    }
    let mut current = None;
    tempo_changes.retain(|_, bin| {
        let changed = current != Some(*bin);
        current = Some(*bin);
        changed
    });

    let last_needed = placed
        .last()
        .map_or(0, |p| p.0)
        .max(tempo_changes.keys().next_back().copied().unwrap_or(0));

    let mut out = vec![BOS_ID];
    let emit = |token: Token, out: &mut Vec<u32>, report: &mut EncodeReport| match vocab.id(&token)
    {
        Some(id) => out.push(id),
        None => {
            report.unmappable += 1;
            out.push(super::UNK_ID);
        }
    };

    let mut bar_start = 0u64;
    let mut ts = initial_ts;
    let mut prev_ts: Option<TimeSignature> = None;
    let mut note_idx = 0;
    let mut pending_idx = 0;
    while bar_start <= last_needed {
        while pending_idx < pending_ts.len() && pending_ts[pending_idx].0 <= bar_start {
            ts = pending_ts[pending_idx].1;
            pending_idx += 1;
        }
        let bar_len = bar_positions(ts, res) as u64;
        let bar_end = bar_start + bar_len;

        emit(Token::Bar, &mut out, &mut report);
        if prev_ts != Some(ts) {
            emit(Token::TimeSig(ts), &mut out, &mut report);
            prev_ts = Some(ts);
        }

        let mut positions: Vec<u64> = tempo_changes
            .range(bar_start..bar_end)
            .map(|(g, _)| *g)
            .collect();
        let first_note = note_idx;
        while note_idx < placed.len() && placed[note_idx].0 < bar_end {
            positions.push(placed[note_idx].0);
            note_idx += 1;
        }
        positions.sort_unstable();
        positions.dedup();

        let mut k = first_note;
        for pos in positions {
            let offset = pos - bar_start;
            emit(
                Token::Position(u16::try_from(offset).unwrap_or(u16::MAX)),
                &mut out,
                &mut report,
            );
            if let Some(&bin) = tempo_changes.get(&pos) {
                emit(Token::Tempo(bin), &mut out, &mut report);
            }
            while k < note_idx && placed[k].0 == pos {
                let (_, on_grid, n) = placed[k];
                k += 1;
                if !on_grid {
                    report.unmappable += 1;
                    out.push(super::UNK_ID);
                    continue;
                }
                let units = tick_to_grid(n.duration, tpq, res).max(1);
                emit(Token::Program(program_of(n)), &mut out, &mut report);
                emit(Token::Pitch(n.pitch), &mut out, &mut report);
                emit(
                    Token::Velocity(vocab.velocity_bin(n.velocity)),
                    &mut out,
                    &mut report,
                );
                emit(
                    Token::Duration(vocab.duration_bin(units)),
                    &mut out,
                    &mut report,
                );
            }
        }
        bar_start = bar_end;
    }
    out.push(EOS_ID);
    Encoded {
        tokens: TokenSequence { ids: out },
        report,
    }
}

#[derive(Default)]
struct PartialNote {
    program: Option<Program>,
    pitch: Option<u8>,
    velocity: Option<u8>,
}

impl PartialNote {
    fn is_started(&self) -> bool {
        self.program.is_some()
    }
}

/// Best-effort reconstruction from arbitrary token ids. Tokens that break
/// the grammar are skipped and counted; decoding stops at EOS.
pub fn decode(tokens: &TokenSequence, vocab: &Vocabulary, ticks_per_quarter: u16) -> Decoded {
    let res = vocab.resolution();
    let tick = |grid: u64| grid_to_tick(grid, ticks_per_quarter, res);
    let mut report = DecodeReport::default();
    let mut notes = Vec::new();
    let mut meta = MetaEvents::default();

    let mut bar: Option<(u64, u64)> = None; // (start, length) in grid units
    let mut ts = TimeSignature::COMMON;
    let mut position: Option<u64> = None;
    let mut partial = PartialNote::default();
    let mut last_tempo: Option<u8> = None;

    for (i, &id) in tokens.ids.iter().enumerate() {
        let Some(token) = vocab.token(id) else {
            report.violations += 1;
            continue;
        };
        let mut violation = false;
        match token {
            Token::Pad => {}
            Token::Unk => report.unknown += 1,
            Token::Bos => violation = i != 0,
            Token::Eos => break,
            Token::Bar => {
                violation = partial.is_started();
                partial = PartialNote::default();
                let start = bar.map_or(0, |(s, l)| s + l);
                bar = Some((start, bar_positions(ts, res) as u64));
                position = None;
            }
            Token::TimeSig(new_ts) => match bar {
                Some((start, _)) if position.is_none() => {
                    if meta.time_signatures.last().map(|e| e.1) != Some(new_ts) {
                        meta.time_signatures.push((tick(start), new_ts));
                    }
                    ts = new_ts;
                    bar = Some((start, bar_positions(ts, res) as u64));
                }
                _ => violation = true,
            },
            Token::Position(p) => match bar {
                Some((start, len)) if (p as u64) < len => {
                    violation = partial.is_started();
                    partial = PartialNote::default();
                    position = Some(start + p as u64);
                }
                _ => violation = true,
            },
            Token::Tempo(bin) => match position {
                Some(pos) if !partial.is_started() => {
                    if last_tempo != Some(bin) {
                        meta.tempos.push((tick(pos), vocab.tempo_value(bin)));
                        last_tempo = Some(bin);
                    }
                }
                _ => violation = true,
            },
            Token::Program(program) => {
                if position.is_some() {
                    violation = partial.is_started();
                    partial = PartialNote {
                        program: Some(program),
                        ..Default::default()
                    };
                } else {
                    violation = true;
                }
            }
            Token::Pitch(p) => {
                if partial.program.is_some() && partial.pitch.is_none() {
                    partial.pitch = Some(p);
                } else {
                    violation = true;
                }
            }
            Token::Velocity(v) => {
                if partial.pitch.is_some() && partial.velocity.is_none() {
                    partial.velocity = Some(vocab.velocity_value(v));
                } else {
                    violation = true;
                }
            }
            Token::Duration(d) => match (position, &partial) {
                (
                    Some(pos),
                    PartialNote {
                        program: Some(program),
                        pitch: Some(pitch),
                        velocity: Some(velocity),
                    },
                ) => {
                    let units = vocab.duration_value(d) as u64;
                    let (program, is_drum) = match program {
                        Program::Melodic(p) => (*p, false),
                        Program::Drums => (0, true),
                    };
                    notes.push(Note {
                        onset: tick(pos),
                        duration: (tick(pos + units) - tick(pos)).max(1),
                        pitch: *pitch,
                        velocity: *velocity,
                        program,
                        is_drum,
                    });
                    partial = PartialNote::default();
                }
                _ => violation = true,
            },
        }
        if violation {
            report.violations += 1;
        }
    }
    if partial.is_started() {
        report.violations += 1;
    }
    Decoded {
        notes: NoteList::new(ticks_per_quarter, notes),
        meta,
        report,
    }
}
