#![allow(clippy::needless_range_loop)]

mod common;

use notecode::code_encoder::{apply_mlm_masking, Corruption, MaskingPolicy};
use notecode::tokenize::{CodeVocab, TextVocab};
use proptest::prelude::*;
use rand::Rng;

fn code_vocab(n: usize) -> CodeVocab {
    let counts: Vec<(String, usize)> = (0..n).map(|i| (format!("C{i:03}"), 1)).collect();
    notecode::tokenize::build_code_vocab(&counts, 1).unwrap()
}

#[test]
fn corruption_frequencies_follow_policy() {
    let vocab = code_vocab(50);
    let policy = MaskingPolicy::default();
    let mut rng = common::rng(5);
    let (mut mask, mut random, mut keep, mut total) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..10_000 {
        let len = rng.random_range(1..40);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(CodeVocab::NUM_SPECIAL..vocab.len() as u32)).collect();
        let m = apply_mlm_masking(&tokens, &policy, &vocab, &mut rng);
        assert_eq!(m.selected(), policy.mask_count(len));
        for c in m.corruption.iter().flatten() {
            total += 1;
            match c {
                Corruption::Mask => mask += 1,
                Corruption::Random => random += 1,
                Corruption::Keep => keep += 1,
            }
        }
    }
    let f = |x: usize| x as f64 / total as f64;
    assert!((f(mask) - 0.8).abs() < 0.02, "mask {}", f(mask));
    assert!((f(random) - 0.1).abs() < 0.02, "random {}", f(random));
    assert!((f(keep) - 0.1).abs() < 0.02, "keep {}", f(keep));
}

#[test]
fn specials_are_never_selected() {
    let vocab = code_vocab(10);
    let mut rng = common::rng(1);
    let tokens = vec![CodeVocab::CLS, 7, 8, 9, CodeVocab::PAD, 10, 11, CodeVocab::UNK];
    for _ in 0..200 {
        let m = apply_mlm_masking(&tokens, &MaskingPolicy::default(), &vocab, &mut rng);
        for (i, c) in m.corruption.iter().enumerate() {
            if vocab.is_special(tokens[i]) {
                assert!(c.is_none());
                assert_eq!(m.ids[i], tokens[i]);
            }
        }
        assert_eq!(m.selected(), 1);
    }
}

proptest! {
    #[test]
    fn exact_count_and_consistent_labels(len in 0usize..120, seed in 0u64..1000) {
        let vocab = code_vocab(30);
        let policy = MaskingPolicy::default();
        let mut rng = common::rng(seed);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(CodeVocab::NUM_SPECIAL..vocab.len() as u32)).collect();
        let m = apply_mlm_masking(&tokens, &policy, &vocab, &mut rng);
        prop_assert_eq!(m.selected(), (0.2 * len as f64).round() as usize);
        for i in 0..len {
            match m.corruption[i] {
                Some(c) => {
                    prop_assert_eq!(m.labels[i], tokens[i] as i64);
                    match c {
                        Corruption::Mask => prop_assert_eq!(m.ids[i], CodeVocab::MASK),
                        Corruption::Keep => prop_assert_eq!(m.ids[i], tokens[i]),
                        Corruption::Random => prop_assert!(!vocab.is_special(m.ids[i])),
                    }
                }
                None => {
                    prop_assert_eq!(m.labels[i], policy.ignore_index);
                    prop_assert_eq!(m.ids[i], tokens[i]);
                }
            }
        }
    }
}

#[test]
fn text_masking_uses_text_mask_id() {
    let corpus = ["alpha beta gamma delta", "beta gamma"];
    let vocab = notecode::tokenize::train_bpe(corpus, 30).unwrap();
    let ids = vocab.encode("alpha beta gamma delta alpha beta gamma delta alpha beta");
    let policy = MaskingPolicy {
        mask_token_frac: 1.0,
        random_frac: 0.0,
        keep_frac: 0.0,
        ..MaskingPolicy::default()
    };
    let m = apply_mlm_masking(&ids, &policy, &vocab, &mut common::rng(2));
    assert!(m.selected() > 0);
    assert!(m.corruption.iter().zip(&m.ids).all(|(c, &id)| c.is_none() || id == TextVocab::MASK));
}
