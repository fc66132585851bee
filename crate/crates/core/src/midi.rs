//! Standard MIDI File reading and writing.
//!
//! Files are held with absolute tick times. Delta times only exist at the
//! byte boundary, inside [`parse_midi`] and [`write_midi`].

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DRUM_CHANNEL: u8 = 9;
pub const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated chunk at byte {0}")]
    TruncatedChunk(usize),
    #[error("invalid variable-length quantity at byte {0}")]
    InvalidVariableLengthQuantity(usize),
    #[error("SMPTE time division is not supported")]
    SmpteUnsupported,
    #[error("malformed event at byte {offset}: {reason}")]
    MalformedEvent { offset: usize, reason: String },
    #[error("invalid file: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSignature {
    pub numerator: u8,
    pub denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature {
        numerator: 4,
        denominator: 4,
    };

    pub fn new(numerator: u8, denominator: u8) -> Self {
        Self {
            numerator,
            denominator,
        }
    }

    /// Bar length in quarter notes.
    pub fn quarters_per_bar(&self) -> f64 {
        self.numerator as f64 * 4.0 / self.denominator as f64
    }
}

impl std::fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

impl std::str::FromStr for TimeSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("bad time signature {s:?}"))?;
        let numerator = n.trim().parse::<u8>().map_err(|e| e.to_string())?;
        let denominator = d.trim().parse::<u8>().map_err(|e| e.to_string())?;
        if numerator == 0 || !denominator.is_power_of_two() {
            return Err(format!("bad time signature {s:?}"));
        }
        Ok(Self {
            numerator,
            denominator,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    NoteOn {
        channel: u8,
        pitch: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        pitch: u8,
    },
    ProgramChange {
        channel: u8,
        program: u8,
    },
    SetTempo {
        microseconds_per_quarter: u32,
    },
    TimeSignature(TimeSignature),
    KeySignature {
        sharps: i8,
        mode: Mode,
    },
    EndOfTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
}

impl Event {
    pub fn new(tick: u64, kind: EventKind) -> Self {
        Self { tick, kind }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Track {
    pub events: Vec<Event>,
}

impl Track {
    /// Tick of the last event, or 0 for an empty track.
    pub fn end_tick(&self) -> u64 {
        self.events.last().map_or(0, |e| e.tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    SingleTrack,
    MultiTrack,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiFile {
    pub format: Format,
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Track>,
}

/// A sounding note with absolute timing in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Note {
    pub onset: u64,
    pub duration: u64,
    pub pitch: u8,
    pub velocity: u8,
    pub program: u8,
    pub is_drum: bool,
}

impl Note {
    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }

    fn sort_key(&self) -> (u64, bool, u8, u8, u64, u8) {
        (
            self.onset,
            self.is_drum,
            self.program,
            self.pitch,
            self.duration,
            self.velocity,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoteList {
    pub ticks_per_quarter: u16,
    pub notes: Vec<Note>,
}

impl NoteList {
    pub fn new(ticks_per_quarter: u16, mut notes: Vec<Note>) -> Self {
        notes.sort_by_key(Note::sort_key);
        Self {
            ticks_per_quarter,
            notes,
        }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Sort into canonical order: onset, drums last, program, pitch.
    pub fn canonicalize(&mut self) {
        self.notes.sort_by_key(Note::sort_key);
    }

    pub fn total_duration(&self) -> u64 {
        self.notes.iter().map(|n| n.duration).sum()
    }
}

/// Tempo and time-signature changes in absolute ticks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaEvents {
    pub tempos: Vec<(u64, f64)>,
    pub time_signatures: Vec<(u64, TimeSignature)>,
}

impl MidiFile {
    pub fn new(ticks_per_quarter: u16) -> Self {
        Self {
            format: Format::SingleTrack,
            ticks_per_quarter,
            tracks: vec![Track {
                events: vec![Event::new(0, EventKind::EndOfTrack)],
            }],
        }
    }

    pub fn end_tick(&self) -> u64 {
        self.tracks.iter().map(Track::end_tick).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        if self.ticks_per_quarter == 0 || self.ticks_per_quarter > 0x7fff {
            return Err(MidiError::Invalid("ticks_per_quarter out of range".into()));
        }
        if self.format == Format::SingleTrack && self.tracks.len() != 1 {
            return Err(MidiError::Invalid(
                "format 0 requires exactly one track".into(),
            ));
        }
        if self.tracks.len() > u16::MAX as usize {
            return Err(MidiError::Invalid("too many tracks".into()));
        }
        for track in &self.tracks {
            if track.events.windows(2).any(|w| w[0].tick > w[1].tick) {
                return Err(MidiError::Invalid("event ticks decrease".into()));
            }
            for e in &track.events {
                let ok = match e.kind {
                    EventKind::NoteOn {
                        channel,
                        pitch,
                        velocity,
                    } => channel < 16 && pitch < 128 && (1..128).contains(&velocity),
                    EventKind::NoteOff { channel, pitch } => channel < 16 && pitch < 128,
                    EventKind::ProgramChange { channel, program } => channel < 16 && program < 128,
                    EventKind::SetTempo {
                        microseconds_per_quarter,
                    } => (1..1 << 24).contains(&microseconds_per_quarter),
                    EventKind::TimeSignature(ts) => {
                        ts.numerator > 0 && ts.denominator.is_power_of_two()
                    }
                    EventKind::KeySignature { sharps, .. } => (-7..=7).contains(&sharps),
                    EventKind::EndOfTrack => true,
                };
                if !ok {
                    return Err(MidiError::Invalid(format!("event out of range: {e:?}")));
                }
            }
        }
        Ok(())
    }

    /// Bring the file into the canonical in-memory form: every track ends with
    /// exactly one `EndOfTrack`, placed at or after its last event.
    pub fn normalize(&mut self) {
        for track in &mut self.tracks {
            let end = track.end_tick();
            track.events.retain(|e| e.kind != EventKind::EndOfTrack);
            track.events.push(Event::new(end, EventKind::EndOfTrack));
        }
    }

    /// Merge all tracks into a single format-0 track, stable by track order
    /// at equal ticks.
    pub fn merged(&self) -> MidiFile {
        let mut events: Vec<(u64, usize, usize, Event)> = Vec::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            for (ei, e) in track.events.iter().enumerate() {
                if e.kind != EventKind::EndOfTrack {
                    events.push((e.tick, ti, ei, *e));
                }
            }
        }
        events.sort_by_key(|&(t, ti, ei, _)| (t, ti, ei));
        let mut out: Vec<Event> = events.into_iter().map(|x| x.3).collect();
        out.push(Event::new(self.end_tick(), EventKind::EndOfTrack));
        MidiFile {
            format: Format::SingleTrack,
            ticks_per_quarter: self.ticks_per_quarter,
            tracks: vec![Track { events: out }],
        }
    }

    /// All events across tracks, ordered by tick then track then position.
    pub fn timeline(&self) -> Vec<(usize, Event)> {
        let mut events: Vec<(u64, usize, usize, Event)> = Vec::new();
        for (ti, track) in self.tracks.iter().enumerate() {
            for (ei, e) in track.events.iter().enumerate() {
                events.push((e.tick, ti, ei, *e));
            }
        }
        events.sort_by_key(|&(t, ti, ei, _)| (t, ti, ei));
        events.into_iter().map(|(_, ti, _, e)| (ti, e)).collect()
    }

    pub fn meta(&self) -> MetaEvents {
        let mut meta = MetaEvents::default();
        for (_, e) in self.timeline() {
            match e.kind {
                EventKind::SetTempo {
                    microseconds_per_quarter,
                } => {
                    meta.tempos
                        .push((e.tick, 60e6 / microseconds_per_quarter as f64));
                }
                EventKind::TimeSignature(ts) => meta.time_signatures.push((e.tick, ts)),
                _ => {}
            }
        }
        meta
    }

    /// Convert a tick position to seconds using the file's tempo map.
    pub fn tick_to_seconds(&self, tick: u64) -> f64 {
        let tpq = self.ticks_per_quarter as f64;
        let mut seconds = 0.0;
        let mut last_tick = 0u64;
        let mut us = DEFAULT_TEMPO_US as f64;
        for (_, e) in self.timeline() {
            if e.tick >= tick {
                break;
            }
            if let EventKind::SetTempo {
                microseconds_per_quarter,
            } = e.kind
            {
                seconds += (e.tick - last_tick) as f64 / tpq * us / 1e6;
                last_tick = e.tick;
                us = microseconds_per_quarter as f64;
            }
        }
        seconds + (tick - last_tick) as f64 / tpq * us / 1e6
    }

    /// First tick at or after `seconds` of playback.
    pub fn seconds_to_tick(&self, seconds: f64) -> u64 {
        let tpq = self.ticks_per_quarter as f64;
        let mut elapsed = 0.0;
        let mut last_tick = 0u64;
        let mut us = DEFAULT_TEMPO_US as f64;
        for (_, e) in self.timeline() {
            if let EventKind::SetTempo {
                microseconds_per_quarter,
            } = e.kind
            {
                let seg = (e.tick - last_tick) as f64 / tpq * us / 1e6;
                if elapsed + seg >= seconds {
                    break;
                }
                elapsed += seg;
                last_tick = e.tick;
                us = microseconds_per_quarter as f64;
            }
        }
        let remaining = (seconds - elapsed).max(0.0);
        last_tick + (remaining * 1e6 / us * tpq).ceil() as u64
    }

    /// Keep only what sounds before `seconds`; notes crossing the cut are
    /// closed at the cut.
    pub fn truncate_seconds(&self, seconds: f64) -> MidiFile {
        let cut = self.seconds_to_tick(seconds);
        let mut out = self.clone();
        for track in &mut out.tracks {
            let mut open: HashMap<(u8, u8), usize> = HashMap::new();
            let mut kept = Vec::new();
            for e in &track.events {
                if e.tick >= cut || e.kind == EventKind::EndOfTrack {
                    continue;
                }
                match e.kind {
                    EventKind::NoteOn { channel, pitch, .. } => {
                        *open.entry((channel, pitch)).or_default() += 1;
                    }
                    EventKind::NoteOff { channel, pitch } => {
                        if let Some(c) = open.get_mut(&(channel, pitch)) {
                            *c = c.saturating_sub(1);
                        }
                    }
                    _ => {}
                }
                kept.push(*e);
            }
            let mut dangling: Vec<_> = open.into_iter().filter(|(_, c)| *c > 0).collect();
            dangling.sort();
            for ((channel, pitch), count) in dangling {
                for _ in 0..count {
                    kept.push(Event::new(cut, EventKind::NoteOff { channel, pitch }));
                }
            }
            let end = kept.last().map_or(0, |e: &Event| e.tick);
            kept.push(Event::new(end, EventKind::EndOfTrack));
            track.events = kept;
        }
        out
    }

    /// Build a format-1 file from notes and meta events. Track 0 carries the
    /// meta events; each (program, drum) voice gets its own track and channel.
    pub fn from_notes(notes: &NoteList, meta: &MetaEvents) -> MidiFile {
        let mut conductor: Vec<Event> = Vec::new();
        for &(tick, ts) in &meta.time_signatures {
            conductor.push(Event::new(tick, EventKind::TimeSignature(ts)));
        }
        for &(tick, bpm) in &meta.tempos {
            let us = (60e6 / bpm).round().clamp(1.0, ((1 << 24) - 1) as f64) as u32;
            conductor.push(Event::new(
                tick,
                EventKind::SetTempo {
                    microseconds_per_quarter: us,
                },
            ));
        }
        conductor.sort_by_key(|e| e.tick);
        let mut tracks = vec![Track { events: conductor }];

        let mut voices: Vec<(bool, u8)> =
            notes.notes.iter().map(|n| (n.is_drum, n.program)).collect();
        voices.sort();
        voices.dedup();
        let mut melodic_channels = (0u8..16).filter(|&c| c != DRUM_CHANNEL).cycle();
        for (is_drum, program) in voices {
            let channel = if is_drum {
                DRUM_CHANNEL
            } else {
                melodic_channels.next().unwrap_or(0)
            };
            // (tick, priority, event): program first, offs before ons at a tick
            let mut evs: Vec<(u64, u8, Event)> = vec![(
                0,
                0,
                Event::new(0, EventKind::ProgramChange { channel, program }),
            )];
            for n in notes
                .notes
                .iter()
                .filter(|n| n.is_drum == is_drum && n.program == program)
            {
                evs.push((
                    n.onset,
                    2,
                    Event::new(
                        n.onset,
                        EventKind::NoteOn {
                            channel,
                            pitch: n.pitch,
                            velocity: n.velocity.max(1),
                        },
                    ),
                ));
                evs.push((
                    n.end(),
                    1,
                    Event::new(
                        n.end(),
                        EventKind::NoteOff {
                            channel,
                            pitch: n.pitch,
                        },
                    ),
                ));
            }
            evs.sort_by_key(|&(t, p, _)| (t, p));
            tracks.push(Track {
                events: evs.into_iter().map(|x| x.2).collect(),
            });
        }
        let mut file = MidiFile {
            format: Format::MultiTrack,
            ticks_per_quarter: notes.ticks_per_quarter,
            tracks,
        };
        file.normalize();
        file
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MidiError::TruncatedChunk(self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::InvalidVariableLengthQuantity(start))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

pub fn parse_midi(bytes: &[u8]) -> Result<MidiFile, MidiError> {
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd tag".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {header_len}"
        )));
    }
    let header = r.take(header_len)?;
    let format = match u16::from_be_bytes([header[0], header[1]]) {
        0 => Format::SingleTrack,
        1 => Format::MultiTrack,
        f => {
            return Err(MidiError::MalformedHeader(format!(
                "unsupported format {f}"
            )))
        }
    };
    let track_count = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteUnsupported);
    }
    if division == 0 {
        return Err(MidiError::MalformedHeader("zero ticks per quarter".into()));
    }
    if format == Format::SingleTrack && track_count != 1 {
        return Err(MidiError::MalformedHeader(format!(
            "format 0 with {track_count} tracks"
        )));
    }

    let mut tracks = Vec::with_capacity(track_count.min(64));
    while tracks.len() < track_count {
        if r.done() {
            return Err(MidiError::TruncatedChunk(r.pos));
        }
        let tag = r.take(4)?;
        let len = r.u32()? as usize;
        let start = r.pos;
        let body = r.take(len)?;
        if tag == b"MTrk" {
            tracks.push(parse_track(body, start)?);
        }
    }
    Ok(MidiFile {
        format,
        ticks_per_quarter: division,
        tracks,
    })
}

fn parse_track(body: &[u8], base: usize) -> Result<Track, MidiError> {
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let mut events = Vec::new();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let bad = |pos: usize, reason: &str| MidiError::MalformedEvent {
        offset: base + pos,
        reason: reason.into(),
    };
    let remap = |e: MidiError| match e {
        MidiError::TruncatedChunk(p) => MidiError::TruncatedChunk(base + p),
        MidiError::InvalidVariableLengthQuantity(p) => {
            MidiError::InvalidVariableLengthQuantity(base + p)
        }
        other => other,
    };

    while !r.done() {
        tick += r.vlq().map_err(remap)? as u64;
        let at = r.pos;
        let first = r.u8().map_err(remap)?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => return Err(bad(at, "data byte without running status")),
            }
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let data = |r: &mut Reader, pending: &mut Option<u8>| -> Result<u8, MidiError> {
                    let b = match pending.take() {
                        Some(b) => b,
                        None => r.u8().map_err(remap)?,
                    };
                    if b & 0x80 != 0 {
                        return Err(bad(r.pos - 1, "status byte where data expected"));
                    }
                    Ok(b)
                };
                let mut pending = first_data;
                match status & 0xf0 {
                    0x80 => {
                        let pitch = data(&mut r, &mut pending)?;
                        data(&mut r, &mut pending)?;
                        events.push(Event::new(tick, EventKind::NoteOff { channel, pitch }));
                    }
                    0x90 => {
                        let pitch = data(&mut r, &mut pending)?;
                        let velocity = data(&mut r, &mut pending)?;
                        let kind = if velocity == 0 {
                            EventKind::NoteOff { channel, pitch }
                        } else {
                            EventKind::NoteOn {
                                channel,
                                pitch,
                                velocity,
                            }
                        };
                        events.push(Event::new(tick, kind));
                    }
                    0xc0 => {
                        let program = data(&mut r, &mut pending)?;
                        events.push(Event::new(
                            tick,
                            EventKind::ProgramChange { channel, program },
                        ));
                    }
                    0xd0 => {
                        data(&mut r, &mut pending)?;
                    }
                    _ => {
                        data(&mut r, &mut pending)?;
                        data(&mut r, &mut pending)?;
                    }
                }
            }
            0xff => {
                let kind = r.u8().map_err(remap)?;
                let len = r.vlq().map_err(remap)? as usize;
                let data = r.take(len).map_err(remap)?;
                match (kind, len) {
                    (0x2f, _) => {
                        events.push(Event::new(tick, EventKind::EndOfTrack));
                        break;
                    }
                    (0x51, 3) => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us > 0 {
                            events.push(Event::new(
                                tick,
                                EventKind::SetTempo {
                                    microseconds_per_quarter: us,
                                },
                            ));
                        }
                    }
                    (0x58, 4) if data[0] > 0 && data[1] < 8 => {
                        let ts = TimeSignature {
                            numerator: data[0],
                            denominator: 1 << data[1],
                        };
                        events.push(Event::new(tick, EventKind::TimeSignature(ts)));
                    }
                    (0x59, 2) => {
                        let sharps = data[0] as i8;
                        if (-7..=7).contains(&sharps) && data[1] <= 1 {
                            let mode = if data[1] == 0 {
                                Mode::Major
                            } else {
                                Mode::Minor
                            };
                            events.push(Event::new(tick, EventKind::KeySignature { sharps, mode }));
                        }
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq().map_err(remap)? as usize;
                r.take(len).map_err(remap)?;
            }
            _ => return Err(bad(at, "unexpected system message")),
        }
    }
    let mut track = Track { events };
    if track.events.last().map(|e| e.kind) != Some(EventKind::EndOfTrack) {
        track
            .events
            .push(Event::new(track.end_tick(), EventKind::EndOfTrack));
    }
    Ok(track)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7f) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Serialize to SMF bytes. Channel messages use running status; the file is
/// normalized first so every track ends with a single `EndOfTrack`.
pub fn write_midi(file: &MidiFile) -> Result<Vec<u8>, MidiError> {
    file.validate()?;
    let mut file = file.clone();
    file.normalize();

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    let format: u16 = match file.format {
        Format::SingleTrack => 0,
        Format::MultiTrack => 1,
    };
    out.extend_from_slice(&format.to_be_bytes());
    out.extend_from_slice(&(file.tracks.len() as u16).to_be_bytes());
    out.extend_from_slice(&file.ticks_per_quarter.to_be_bytes());

    for track in &file.tracks {
        let mut body = Vec::new();
        let mut last_tick = 0u64;
        let mut running: Option<u8> = None;
        for e in &track.events {
            let delta = e.tick - last_tick;
            if delta > 0x0fff_ffff {
                return Err(MidiError::Invalid("delta time exceeds 28 bits".into()));
            }
            push_vlq(&mut body, delta as u32);
            last_tick = e.tick;
            let mut channel_msg = |status: u8, data: &[u8], body: &mut Vec<u8>| {
                if running != Some(status) {
                    body.push(status);
                    running = Some(status);
                }
                body.extend_from_slice(data);
            };
            match e.kind {
                EventKind::NoteOn {
                    channel,
                    pitch,
                    velocity,
                } => channel_msg(0x90 | channel, &[pitch, velocity], &mut body),
                EventKind::NoteOff { channel, pitch } => {
                    channel_msg(0x80 | channel, &[pitch, 0x40], &mut body)
                }
                EventKind::ProgramChange { channel, program } => {
                    channel_msg(0xc0 | channel, &[program], &mut body)
                }
                EventKind::SetTempo {
                    microseconds_per_quarter,
                } => {
                    let b = microseconds_per_quarter.to_be_bytes();
                    body.extend_from_slice(&[0xff, 0x51, 0x03, b[1], b[2], b[3]]);
                }
                EventKind::TimeSignature(ts) => {
                    let dd = ts.denominator.trailing_zeros() as u8;
                    body.extend_from_slice(&[0xff, 0x58, 0x04, ts.numerator, dd, 24, 8]);
                }
                EventKind::KeySignature { sharps, mode } => {
                    let mi = u8::from(mode == Mode::Minor);
                    body.extend_from_slice(&[0xff, 0x59, 0x02, sharps as u8, mi]);
                }
                EventKind::EndOfTrack => body.extend_from_slice(&[0xff, 0x2f, 0x00]),
            }
        }
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    Ok(out)
}

/// Pair NoteOn/NoteOff per (channel, pitch) in FIFO order across all tracks.
/// Notes left open are closed at the last event tick of the track that
/// started them.
pub fn extract_notes(file: &MidiFile) -> NoteList {
    let track_ends: Vec<u64> = file.tracks.iter().map(Track::end_tick).collect();
    let mut programs = [0u8; 16];
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8, u8, usize)>> = HashMap::new();
    let mut notes = Vec::new();

    for (track, e) in file.timeline() {
        match e.kind {
            EventKind::ProgramChange { channel, program } => programs[channel as usize] = program,
            EventKind::NoteOn {
                channel,
                pitch,
                velocity,
            } => {
                open.entry((channel, pitch)).or_default().push_back((
                    e.tick,
                    velocity,
                    programs[channel as usize],
                    track,
                ));
            }
            EventKind::NoteOff { channel, pitch } => {
                if let Some((onset, velocity, program, _)) =
                    open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front())
                {
                    notes.push(Note {
                        onset,
                        duration: (e.tick - onset).max(1),
                        pitch,
                        velocity,
                        program,
                        is_drum: channel == DRUM_CHANNEL,
                    });
                }
            }
            _ => {}
        }
    }
    for ((channel, pitch), queue) in open {
        for (onset, velocity, program, track) in queue {
            let end = track_ends[track].max(onset);
            notes.push(Note {
                onset,
                duration: (end - onset).max(1),
                pitch,
                velocity,
                program,
                is_drum: channel == DRUM_CHANNEL,
            });
        }
    }
    NoteList::new(file.ticks_per_quarter, notes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Vec<u8> {
        let mut b = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0".to_vec();
        b.extend_from_slice(b"MTrk\x00\x00\x00\x04\x00\xff\x2f\x00");
        b
    }

    #[test]
    fn parses_minimal_file() {
        let f = parse_midi(&minimal()).unwrap();
        assert_eq!(f.tracks.len(), 1);
        assert_eq!(f.ticks_per_quarter, 480);
        assert!(extract_notes(&f).is_empty());
    }

    #[test]
    fn corrupted_header_tag() {
        let mut b = minimal();
        b[1] = b'X';
        assert!(matches!(parse_midi(&b), Err(MidiError::MalformedHeader(_))));
    }

    #[test]
    fn smpte_rejected() {
        let mut b = minimal();
        b[12] = 0xe7;
        assert_eq!(parse_midi(&b), Err(MidiError::SmpteUnsupported));
    }

    #[test]
    fn truncated_track() {
        let b = minimal();
        assert!(matches!(
            parse_midi(&b[..b.len() - 2]),
            Err(MidiError::TruncatedChunk(_))
        ));
    }

    #[test]
    fn bad_vlq() {
        let mut b = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0".to_vec();
        b.extend_from_slice(b"MTrk\x00\x00\x00\x08\xff\xff\xff\xff\x00\xff\x2f\x00");
        assert!(matches!(
            parse_midi(&b),
            Err(MidiError::InvalidVariableLengthQuantity(_))
        ));
    }

    #[test]
    fn running_status_and_velocity_zero() {
        let mut b = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0".to_vec();
        // on 60, (running) on 64, then 60 off via velocity 0
        let body = [
            0x00, 0x90, 60, 80, 0x00, 64, 90, 0x83, 0x60, 60, 0, 0x00, 64, 0, 0x00, 0xff, 0x2f,
            0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(body.len() as u32).to_be_bytes());
        b.extend_from_slice(&body);
        let f = parse_midi(&b).unwrap();
        let ev = &f.tracks[0].events;
        assert_eq!(
            ev[1].kind,
            EventKind::NoteOn {
                channel: 0,
                pitch: 64,
                velocity: 90
            }
        );
        assert_eq!(
            ev[2],
            Event::new(
                480,
                EventKind::NoteOff {
                    channel: 0,
                    pitch: 60
                }
            )
        );
        let notes = extract_notes(&f);
        assert_eq!(notes.len(), 2);
        assert_eq!(notes.notes[0].duration, 480);
    }

    #[test]
    fn unknown_meta_and_sysex_skipped() {
        let mut b = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x00\x60".to_vec();
        let body = [
            0x00, 0xff, 0x03, 0x03, b'a', b'b', b'c', // track name
            0x00, 0xf0, 0x02, 0x7e, 0xf7, // sysex
            0x00, 0x90, 60, 80, 0x60, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(body.len() as u32).to_be_bytes());
        b.extend_from_slice(&body);
        let f = parse_midi(&b).unwrap();
        assert_eq!(extract_notes(&f).len(), 1);
    }

    #[test]
    fn vlq_encoding_matches_reference_values() {
        for (v, bytes) in [
            (0u32, vec![0x00]),
            (0x40, vec![0x40]),
            (0x7f, vec![0x7f]),
            (0x80, vec![0x81, 0x00]),
            (0x2000, vec![0xc0, 0x00]),
            (0x3fff, vec![0xff, 0x7f]),
            (0x0fff_ffff, vec![0xff, 0xff, 0xff, 0x7f]),
        ] {
            let mut out = Vec::new();
            push_vlq(&mut out, v);
            assert_eq!(out, bytes);
            assert_eq!(
                Reader {
                    bytes: &out,
                    pos: 0
                }
                .vlq()
                .unwrap(),
                v
            );
        }
    }

    fn note_file(events: Vec<Event>) -> MidiFile {
        let mut f = MidiFile {
            format: Format::SingleTrack,
            ticks_per_quarter: 480,
            tracks: vec![Track { events }],
        };
        f.normalize();
        f
    }

    #[test]
    fn single_note_extraction() {
        let f = note_file(vec![
            Event::new(
                0,
                EventKind::NoteOn {
                    channel: 0,
                    pitch: 60,
                    velocity: 80,
                },
            ),
            Event::new(
                480,
                EventKind::NoteOff {
                    channel: 0,
                    pitch: 60,
                },
            ),
        ]);
        let notes = extract_notes(&f);
        assert_eq!(
            notes.notes,
            vec![Note {
                onset: 0,
                duration: 480,
                pitch: 60,
                velocity: 80,
                program: 0,
                is_drum: false
            }]
        );
    }

    #[test]
    fn fifo_pairing_of_overlapping_notes() {
        let f = note_file(vec![
            Event::new(
                0,
                EventKind::NoteOn {
                    channel: 0,
                    pitch: 60,
                    velocity: 80,
                },
            ),
            Event::new(
                100,
                EventKind::NoteOn {
                    channel: 0,
                    pitch: 60,
                    velocity: 90,
                },
            ),
            Event::new(
                200,
                EventKind::NoteOff {
                    channel: 0,
                    pitch: 60,
                },
            ),
            Event::new(
                500,
                EventKind::NoteOff {
                    channel: 0,
                    pitch: 60,
                },
            ),
        ]);
        let notes = extract_notes(&f);
        assert_eq!(notes.notes[0].onset, 0);
        assert_eq!(notes.notes[0].duration, 200);
        assert_eq!(notes.notes[0].velocity, 80);
        assert_eq!(notes.notes[1].onset, 100);
        assert_eq!(notes.notes[1].duration, 400);
    }

    #[test]
    fn dangling_note_closed_at_track_end() {
        let f = note_file(vec![
            Event::new(
                0,
                EventKind::NoteOn {
                    channel: 0,
                    pitch: 60,
                    velocity: 80,
                },
            ),
            Event::new(
                960,
                EventKind::ProgramChange {
                    channel: 1,
                    program: 3,
                },
            ),
        ]);
        let notes = extract_notes(&f);
        assert_eq!(notes.notes[0].duration, 960);
    }

    #[test]
    fn program_and_drum_assignment() {
        let f = note_file(vec![
            Event::new(
                0,
                EventKind::ProgramChange {
                    channel: 2,
                    program: 40,
                },
            ),
            Event::new(
                0,
                EventKind::NoteOn {
                    channel: 2,
                    pitch: 70,
                    velocity: 80,
                },
            ),
            Event::new(
                0,
                EventKind::NoteOn {
                    channel: 9,
                    pitch: 36,
                    velocity: 100,
                },
            ),
            Event::new(
                120,
                EventKind::NoteOff {
                    channel: 2,
                    pitch: 70,
                },
            ),
            Event::new(
                120,
                EventKind::NoteOff {
                    channel: 9,
                    pitch: 36,
                },
            ),
        ]);
        let notes = extract_notes(&f);
        assert_eq!(notes.notes[0].program, 40);
        assert!(!notes.notes[0].is_drum);
        assert!(notes.notes[1].is_drum);
    }

    #[test]
    fn two_track_roundtrip_preserves_track_count() {
        let mut f = MidiFile::new(480);
        f.format = Format::MultiTrack;
        f.tracks.push(Track {
            events: vec![
                Event::new(
                    0,
                    EventKind::NoteOn {
                        channel: 0,
                        pitch: 60,
                        velocity: 80,
                    },
                ),
                Event::new(
                    480,
                    EventKind::NoteOff {
                        channel: 0,
                        pitch: 60,
                    },
                ),
            ],
        });
        f.normalize();
        let back = parse_midi(&write_midi(&f).unwrap()).unwrap();
        assert_eq!(back.tracks.len(), 2);
        assert_eq!(back, f);
    }

    #[test]
    fn empty_file_writes_valid_smf() {
        let f = MidiFile::new(96);
        let bytes = write_midi(&f).unwrap();
        assert_eq!(parse_midi(&bytes).unwrap(), f);
    }

    #[test]
    fn seconds_conversion_uses_tempo_map() {
        let f = note_file(vec![
            Event::new(
                0,
                EventKind::SetTempo {
                    microseconds_per_quarter: 500_000,
                },
            ),
            Event::new(
                960,
                EventKind::SetTempo {
                    microseconds_per_quarter: 1_000_000,
                },
            ),
            Event::new(
                1920,
                EventKind::NoteOn {
                    channel: 0,
                    pitch: 60,
                    velocity: 1,
                },
            ),
        ]);
        assert!((f.tick_to_seconds(960) - 1.0).abs() < 1e-12);
        assert!((f.tick_to_seconds(1920) - 3.0).abs() < 1e-12);
        assert_eq!(f.seconds_to_tick(1.0), 960);
        assert_eq!(f.seconds_to_tick(2.0), 1440);
    }

    #[test]
    fn from_notes_roundtrips_through_extract() {
        let notes = NoteList::new(
            480,
            vec![
                Note {
                    onset: 0,
                    duration: 480,
                    pitch: 60,
                    velocity: 80,
                    program: 0,
                    is_drum: false,
                },
                Note {
                    onset: 480,
                    duration: 240,
                    pitch: 64,
                    velocity: 70,
                    program: 40,
                    is_drum: false,
                },
                Note {
                    onset: 480,
                    duration: 60,
                    pitch: 38,
                    velocity: 100,
                    program: 0,
                    is_drum: true,
                },
            ],
        );
        let f = MidiFile::from_notes(&notes, &MetaEvents::default());
        let back = extract_notes(&parse_midi(&write_midi(&f).unwrap()).unwrap());
        assert_eq!(back, notes);
    }
}
