//! Objective metrics for generated pieces: compression ratio from a
//! COSIATEC cover, tempo-bin agreement (TB/TBT) and key agreement (CK/CKD).

mod pattern;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use pattern::{
    compression_ratio, cosiatec, difference_histogram, encoded_size, siatec, to_point_set, Point,
    PointSet, Tec,
};

use crate::attributes::{estimate_key, extract_tempo, Key};
use crate::midi::{extract_notes, MidiFile, Mode};
use crate::remi::quantize;

/// Tempo bin borders in bpm. Bins are left-closed: `[40, 60)` and so on.
pub const TEMPO_BIN_BORDERS: [f64; 8] = [40.0, 60.0, 70.0, 90.0, 110.0, 140.0, 160.0, 210.0];
/// Only the opening of a reference piece is compared against a generation.
pub const REFERENCE_WINDOW_SECONDS: f64 = 40.0;
/// Grid used to place notes in the point set.
pub const POINT_GRID_RESOLUTION: u32 = 8;

pub fn tempo_bin(bpm: f64) -> usize {
    TEMPO_BIN_BORDERS.iter().take_while(|&&b| bpm >= b).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TempoBinMatch {
    pub hit: bool,
    pub tolerant_hit: bool,
}

pub fn tempo_bin_metrics(pred_bpm: f64, truth_bpm: f64) -> TempoBinMatch {
    let (a, b) = (tempo_bin(pred_bpm), tempo_bin(truth_bpm));
    TempoBinMatch {
        hit: a == b,
        tolerant_hit: a.abs_diff(b) <= 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMatch {
    pub correct: bool,
    pub correct_dup: bool,
}

fn relative(a: Key, b: Key) -> bool {
    match (a.mode, b.mode) {
        (Mode::Major, Mode::Minor) => (a.tonic + 9) % 12 == b.tonic,
        (Mode::Minor, Mode::Major) => (b.tonic + 9) % 12 == a.tonic,
        _ => false,
    }
}

/// Exact match, and exact-or-relative (major tonic t with minor tonic t+9).
pub fn key_metrics(pred: Key, truth: Key) -> KeyMatch {
    let correct = pred == truth;
    KeyMatch {
        correct,
        correct_dup: correct || relative(pred, truth),
    }
}

/// What a generation is compared against.
#[derive(Debug, Clone)]
pub enum Reference {
    Midi(MidiFile),
    /// Attributes named in the caption.
    Attributes {
        bpm: f64,
        key: Key,
    },
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub generated: MidiFile,
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub generated_notes: usize,
    pub generated_seconds: f64,
    pub compression_ratio: Option<f64>,
    pub reference_compression_ratio: Option<f64>,
    pub generated_bpm: f64,
    pub reference_bpm: f64,
    pub tempo_bin_hit: bool,
    pub tempo_bin_tolerant_hit: bool,
    pub generated_key: Option<Key>,
    pub reference_key: Key,
    pub key_correct: bool,
    pub key_correct_dup: bool,
    pub clap_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub file_id: String,
    pub metrics: Option<FileMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub files_evaluated: usize,
    pub files_failed: usize,
    pub compression_ratio: Option<f64>,
    pub reference_compression_ratio: Option<f64>,
    pub tb: f64,
    pub tbt: f64,
    pub ck: f64,
    pub ckd: f64,
    pub clap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregate: Aggregates,
    pub files: Vec<FileReport>,
}

fn piece_compression(file: &MidiFile) -> Option<f64> {
    let notes = quantize(&extract_notes(file), POINT_GRID_RESOLUTION);
    compression_ratio(&to_point_set(&notes, POINT_GRID_RESOLUTION))
}

/// Metrics for a single pair. Errors only when the reference has no key.
pub fn evaluate_pair(pair: &EvalPair, clap: Option<f64>) -> Result<FileMetrics, String> {
    let generated_notes = extract_notes(&pair.generated);
    let generated_bpm = extract_tempo(&pair.generated);
    let generated_key = estimate_key(&generated_notes).ok().map(|k| k.key);

    let (reference_bpm, reference_key, reference_compression_ratio) = match &pair.reference {
        Reference::Midi(file) => {
            let window = file.truncate_seconds(REFERENCE_WINDOW_SECONDS);
            let key =
                estimate_key(&extract_notes(&window)).map_err(|e| format!("reference: {e}"))?;
            (extract_tempo(&window), key.key, piece_compression(&window))
        }
        Reference::Attributes { bpm, key } => (*bpm, *key, None),
    };
    let tempo = tempo_bin_metrics(generated_bpm, reference_bpm);
    let key = generated_key.map_or(
        KeyMatch {
            correct: false,
            correct_dup: false,
        },
        |k| key_metrics(k, reference_key),
    );
    let end = generated_notes
        .notes
        .iter()
        .map(|n| n.end())
        .max()
        .unwrap_or(0);

    Ok(FileMetrics {
        generated_notes: generated_notes.len(),
        generated_seconds: pair.generated.tick_to_seconds(end),
        compression_ratio: piece_compression(&pair.generated),
        reference_compression_ratio,
        generated_bpm,
        reference_bpm,
        tempo_bin_hit: tempo.hit,
        tempo_bin_tolerant_hit: tempo.tolerant_hit,
        generated_key,
        reference_key,
        key_correct: key.correct,
        key_correct_dup: key.correct_dup,
        clap_score: clap,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Fold per-file metrics into corpus means, in file order.
pub fn aggregate(files: &[FileReport]) -> Aggregates {
    let ok: Vec<&FileMetrics> = files.iter().filter_map(|f| f.metrics.as_ref()).collect();
    let frac = |pred: fn(&FileMetrics) -> bool| {
        mean(ok.iter().map(|m| if pred(m) { 1.0 } else { 0.0 })).unwrap_or(0.0)
    };
    Aggregates {
        files_evaluated: ok.len(),
        files_failed: files.len() - ok.len(),
        compression_ratio: mean(ok.iter().filter_map(|m| m.compression_ratio)),
        reference_compression_ratio: mean(ok.iter().filter_map(|m| m.reference_compression_ratio)),
        tb: frac(|m| m.tempo_bin_hit),
        tbt: frac(|m| m.tempo_bin_tolerant_hit),
        ck: frac(|m| m.key_correct),
        ckd: frac(|m| m.key_correct_dup),
        clap: mean(ok.iter().filter_map(|m| m.clap_score)),
    }
}

/// Evaluate every pair. Per-file failures are recorded in the report and do
/// not stop the run.
pub fn evaluate_corpus(pairs: &[EvalPair], clap_scores: &HashMap<String, f64>) -> MetricsReport {
    let files: Vec<FileReport> = pairs
        .iter()
        .map(
            |pair| match evaluate_pair(pair, clap_scores.get(&pair.id).copied()) {
                Ok(m) => FileReport {
                    file_id: pair.id.clone(),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => FileReport {
                    file_id: pair.id.clone(),
                    metrics: None,
                    error: Some(e),
                },
            },
        )
        .collect();
    MetricsReport {
        aggregate: aggregate(&files),
        files,
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ClapRecord {
    file_id: String,
    score: f64,
}

/// Parse line-delimited `{"file_id": ..., "score": ...}` records.
pub fn parse_clap_scores(text: &str) -> Result<HashMap<String, f64>, String> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClapRecord =
            serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.insert(rec.file_id, rec.score);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tempo_bins_are_left_closed() {
        assert_eq!(tempo_bin(39.9), 0);
        assert_eq!(tempo_bin(40.0), 1);
        assert_eq!(tempo_bin(60.0), 2);
        assert_eq!(tempo_bin(209.99), 7);
        assert_eq!(tempo_bin(210.0), 8);
        assert_eq!(tempo_bin(500.0), 8);
    }

    #[test]
    fn tempo_bin_examples() {
        assert_eq!(
            tempo_bin_metrics(114.0, 120.0),
            TempoBinMatch {
                hit: true,
                tolerant_hit: true
            }
        );
        assert_eq!(
            tempo_bin_metrics(105.0, 114.0),
            TempoBinMatch {
                hit: false,
                tolerant_hit: true
            }
        );
        assert_eq!(
            tempo_bin_metrics(40.0, 39.9),
            TempoBinMatch {
                hit: false,
                tolerant_hit: true
            }
        );
        assert_eq!(
            tempo_bin_metrics(50.0, 100.0),
            TempoBinMatch {
                hit: false,
                tolerant_hit: false
            }
        );
    }

    #[test]
    fn key_examples() {
        let c = Key::new(0, Mode::Major);
        assert_eq!(
            key_metrics(c, c),
            KeyMatch {
                correct: true,
                correct_dup: true
            }
        );
        assert_eq!(
            key_metrics(c, Key::new(9, Mode::Minor)),
            KeyMatch {
                correct: false,
                correct_dup: true
            }
        );
        assert_eq!(
            key_metrics(Key::new(9, Mode::Minor), c),
            KeyMatch {
                correct: false,
                correct_dup: true
            }
        );
        assert_eq!(
            key_metrics(c, Key::new(0, Mode::Minor)),
            KeyMatch {
                correct: false,
                correct_dup: false
            }
        );
        assert_eq!(
            key_metrics(c, Key::new(9, Mode::Major)),
            KeyMatch {
                correct: false,
                correct_dup: false
            }
        );
    }

    #[test]
    fn clap_parsing() {
        let scores = parse_clap_scores(
            "{\"file_id\": \"a\", \"score\": 0.25}\n\n{\"file_id\":\"b\",\"score\":0.5}\n",
        )
        .unwrap();
        assert_eq!(scores["a"], 0.25);
        assert_eq!(scores.len(), 2);
        assert!(parse_clap_scores("{oops}").is_err());
    }
}
