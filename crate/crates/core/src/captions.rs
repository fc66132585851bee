//! Pseudo captions built from extracted attributes, and the sentence
//! omission augmentation applied to captions during fine-tuning.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::AttributeSet;

const TEMPLATE_DATA: &str = include_str!("../data/caption_templates.txt");
pub const TEMPLATE_COUNT: usize = 10;
#[cfg(test)]
const PLACEHOLDERS: [&str; 4] = ["{bpm}", "{time_signature}", "{key}", "{instruments}"];

/// Probability that a caption is augmented at all.
pub const OMISSION_PROBABILITY: f64 = 0.5;
/// Range of the fraction of sentences removed from an augmented caption.
pub const OMISSION_FRACTION: (f64, f64) = (0.2, 0.5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTemplate {
    pub id: usize,
    pub pattern: String,
}

pub fn templates() -> Vec<CaptionTemplate> {
    TEMPLATE_DATA
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(id, l)| CaptionTemplate {
            id,
            pattern: l.trim().to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caption {
    pub text: String,
    /// Byte ranges of each sentence in `text`.
    pub sentences: Vec<(usize, usize)>,
}

impl Caption {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = split_sentences(&text);
        Self { text, sentences }
    }

    pub fn sentence(&self, i: usize) -> &str {
        let (a, b) = self.sentences[i];
        &self.text[a..b]
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }
}

/// Sentence spans, split at `.`, `!` or `?` followed by whitespace or the
/// end of the text. Surrounding whitespace is not part of a span.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        let boundary = matches!(c, '.' | '!' | '?')
            && chars.peek().is_none_or(|(_, next)| next.is_whitespace());
        if boundary {
            spans.push((start.take().unwrap_or(i), i + c.len_utf8()));
        }
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}

/// "a", "a and b", "a, b, and c".
fn oxford_list(items: &[String]) -> String {
    match items {
        [] => "no listed instruments".to_string(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn display_instrument(name: &str) -> String {
    name.split(' ')
        .map(|w| match w {
            "english" => "English".to_string(),
            "french" => "French".to_string(),
            _ => w.to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Fill template `template_id` (0-9) with the attributes.
pub fn render_pseudo_caption(attrs: &AttributeSet, template_id: usize) -> Caption {
    let all = templates();
    let pattern = &all[template_id % all.len()].pattern;
    let instruments: Vec<String> = attrs
        .instruments
        .iter()
        .map(|i| display_instrument(i))
        .collect();
    let text = pattern
        .replace("{bpm}", &format!("{}", attrs.bpm.round() as i64))
        .replace("{time_signature}", &attrs.time_signature)
        .replace("{key}", &attrs.key.to_string())
        .replace("{instruments}", &oxford_list(&instruments));
    Caption::new(capitalize_first(&text))
}

/// Render with a template drawn uniformly from the seed.
pub fn random_pseudo_caption(attrs: &AttributeSet, seed: u64) -> Caption {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_pseudo_caption(attrs, rng.random_range(0..TEMPLATE_COUNT))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Omission {
    pub applied: bool,
    /// Drawn fraction; 0 when not applied.
    pub fraction: f64,
    pub removed: usize,
}

/// With probability 0.5 return the caption unchanged; otherwise remove
/// `round(f * n)` sentences, `f ~ U[0.2, 0.5]`, keeping at least one and
/// preserving order.
pub fn omit_sentences(caption: &Caption, seed: u64) -> (Caption, Omission) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = caption.sentence_count();
    if rng.random::<f64>() >= OMISSION_PROBABILITY {
        return (
            caption.clone(),
            Omission {
                applied: false,
                fraction: 0.0,
                removed: 0,
            },
        );
    }
    let fraction = rng.random_range(OMISSION_FRACTION.0..=OMISSION_FRACTION.1);
    let removed = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut dropped = vec![false; n];
    for i in index::sample(&mut rng, n, removed) {
        dropped[i] = true;
    }
    let kept: Vec<&str> = (0..n)
        .filter(|&i| !dropped[i])
        .map(|i| caption.sentence(i))
        .collect();
    (
        Caption::new(kept.join(" ")),
        Omission {
            applied: true,
            fraction,
            removed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::Key;
    use crate::midi::Mode;

    fn attrs(instruments: &[&str]) -> AttributeSet {
        AttributeSet {
            bpm: 114.0,
            time_signature: "4/4".into(),
            key: Key::new(8, Mode::Minor),
            instruments: instruments.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn ten_templates_each_use_every_placeholder_once() {
        let all = templates();
        assert_eq!(all.len(), TEMPLATE_COUNT);
        for t in &all {
            for p in PLACEHOLDERS {
                assert_eq!(t.pattern.matches(p).count(), 1, "template {} / {p}", t.id);
            }
        }
    }

    #[test]
    fn reference_caption() {
        let a = attrs(&[
            "clarinet",
            "english horn",
            "flute",
            "horn",
            "piccolo",
            "trombone",
            "trumpet",
        ]);
        let c = render_pseudo_caption(&a, 0);
        assert_eq!(
            c.text,
            "Played at 114 beats per minute in 4/4 time signature and the key of G# minor, classical piece with \
             the following instruments: clarinet, English horn, flute, horn, piccolo, trombone, and trumpet."
        );
    }

    #[test]
    fn single_instrument_has_no_comma() {
        let c = render_pseudo_caption(&attrs(&["piano"]), 0);
        assert!(c.text.ends_with("instruments: piano."));
        assert_eq!(oxford_list(&["a".into(), "b".into()]), "a and b");
    }

    #[test]
    fn render_is_deterministic() {
        let a = attrs(&["violin"]);
        for id in 0..TEMPLATE_COUNT {
            assert_eq!(render_pseudo_caption(&a, id), render_pseudo_caption(&a, id));
        }
        assert_eq!(random_pseudo_caption(&a, 3), random_pseudo_caption(&a, 3));
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(split_sentences("A. B. C.").len(), 3);
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
        assert_eq!(
            split_sentences("Tempo 114.5 bpm. Done"),
            vec![(0, 16), (17, 21)]
        );
        let midicaps = "A melodic and happy pop song with a Christmas vibe, featuring piano, clean electric guitar, \
            acoustic guitar, and overdriven guitar. The song is in the key of A major with a 4/4 time signature and \
            a moderate tempo. The chord progression revolves around D, E6, D, and E, creating a motivational and \
            loving atmosphere throughout the piece.";
        assert_eq!(split_sentences(midicaps).len(), 3);
    }

    #[test]
    fn one_sentence_caption_is_never_emptied() {
        let c = Caption::new("Only one sentence here.");
        for seed in 0..200 {
            assert_eq!(omit_sentences(&c, seed).0, c);
        }
    }

    fn ten_sentences() -> Caption {
        Caption::new(
            (0..10)
                .map(|i| format!("Sentence {i}."))
                .collect::<Vec<_>>()
                .join(" "),
        )
    }

    #[test]
    fn omission_replays_the_seeded_draws() {
        let c = ten_sentences();
        // find a seed whose draw removes half of the sentences
        let seed = (0..10_000u64)
            .find(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.random::<f64>() < 0.5 && rng.random_range(0.2..=0.5f64) >= 0.45
            })
            .unwrap();
        let (out, info) = omit_sentences(&c, seed);
        assert!(info.applied);
        assert_eq!(info.removed, 5);
        assert_eq!(out.sentence_count(), 5);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let _: f64 = rng.random();
        let _: f64 = rng.random_range(0.2..=0.5);
        let mut dropped: Vec<usize> = index::sample(&mut rng, 10, 5).into_vec();
        dropped.sort();
        let expected: Vec<String> = (0..10)
            .filter(|i| !dropped.contains(i))
            .map(|i| format!("Sentence {i}."))
            .collect();
        let got: Vec<&str> = (0..out.sentence_count()).map(|i| out.sentence(i)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn omission_keeps_a_subsequence() {
        let c = ten_sentences();
        for seed in 0..500 {
            let (out, info) = omit_sentences(&c, seed);
            assert!(out.sentence_count() >= 1);
            assert_eq!(out.sentence_count(), 10 - info.removed);
            if info.applied {
                assert!((0.2..=0.5).contains(&info.fraction));
            }
            let mut it = (0..10).map(|i| c.sentence(i));
            for i in 0..out.sentence_count() {
                assert!(it.any(|s| s == out.sentence(i)));
            }
        }
    }
}
