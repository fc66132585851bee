use midiforge::captions::{omit_sentences, Caption};
use proptest::prelude::*;

fn caption(n: usize) -> Caption {
    Caption::new(
        (0..n)
            .map(|i| format!("Sentence number {i}."))
            .collect::<Vec<_>>()
            .join(" "),
    )
}

proptest! {
    #[test]
    fn kept_sentences_are_a_nonempty_subsequence(n in 1usize..15, seed in any::<u64>()) {
        let c = caption(n);
        let (out, om) = omit_sentences(&c, seed);
        let kept: Vec<&str> = (0..out.sentence_count()).map(|i| out.sentence(i)).collect();
        prop_assert!(!kept.is_empty());
        prop_assert_eq!(kept.len() + om.removed, n);
        let mut it = (0..n).map(|i| c.sentence(i));
        for s in kept {
            prop_assert!(it.any(|x| x == s), "{} out of order", s);
        }
        if om.applied {
            prop_assert!((0.2..=0.5).contains(&om.fraction));
        } else {
            prop_assert_eq!(out, c);
        }
    }
}
