mod common;

use std::collections::HashMap;

use notecode::tokenize::{train_bpe, TextVocab};
use rand::Rng;

/// Brute-force most frequent adjacent character pair with the documented
/// tie-break (lexicographically smallest pair).
fn most_frequent_pair(s: &str) -> (String, String) {
    let chars: Vec<char> = s.chars().collect();
    let mut counts: HashMap<(String, String), usize> = HashMap::new();
    for w in chars.windows(2) {
        *counts.entry((w[0].to_string(), w[1].to_string())).or_default() += 1;
    }
    let best = counts.values().max().copied().unwrap();
    let mut tied: Vec<_> = counts.into_iter().filter(|(_, c)| *c == best).map(|(p, _)| p).collect();
    tied.sort();
    tied.remove(0)
}

#[test]
fn first_merge_on_classic_string() {
    let corpus = "aaabdaaabac";
    let alphabet = 4; // a b c d
    let v = train_bpe([corpus], TextVocab::NUM_SPECIAL as usize + alphabet + 3).unwrap();
    assert_eq!(v.len(), TextVocab::NUM_SPECIAL as usize + alphabet + 3);
    assert_eq!(v.merges()[0], most_frequent_pair(corpus));
    assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
}

#[test]
fn tie_break_prefers_smallest_pair() {
    // "ab" and "cd" both occur twice; "ab" < "cd".
    let v = train_bpe(["cdab cdab"], TextVocab::NUM_SPECIAL as usize + 5 + 1).unwrap();
    let expected = most_frequent_pair("cdab");
    assert_eq!(v.merges()[0], expected);
}

#[test]
fn retraining_is_deterministic() {
    let corpus = ["the patient has chronic cough", "cough and fever noted", "fever resolved"];
    let a = train_bpe(corpus, 60).unwrap();
    let b = train_bpe(corpus, 60).unwrap();
    assert_eq!(a.merges(), b.merges());
    assert_eq!(a, b);
}

#[test]
fn round_trip_on_random_in_alphabet_strings() {
    let corpus = ["alpha beta gamma delta", "epsilon zeta eta theta", "iota kappa lambda mu"];
    let v = train_bpe(corpus, 60).unwrap();
    let alphabet: Vec<char> = corpus.concat().chars().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut r = common::rng(11);
    for _ in 0..1000 {
        let n = r.random_range(0..40);
        let s: String = (0..n).map(|_| alphabet[r.random_range(0..alphabet.len())]).collect();
        let ids = v.encode_text(&s, 4096);
        assert_eq!(ids[0], TextVocab::CLS);
        assert_eq!(v.decode(&ids), s);
    }
}

#[test]
fn truncated_encoding_decodes_to_prefix() {
    let v = train_bpe(["one two three four five six"], 40).unwrap();
    let text = "one two three four five six";
    let ids = v.encode_text(text, 4);
    assert_eq!(ids.len(), 4);
    assert!(text.starts_with(&v.decode(&ids)));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = train_bpe(["spaces  and\ttabs survive"], 40).unwrap();
    let (vp, mp) = (dir.path().join("vocab.tsv"), dir.path().join("merges.txt"));
    v.save(&vp, &mp).unwrap();
    let w = TextVocab::load(&vp, &mp).unwrap();
    assert_eq!(v, w);
    assert_eq!(w.token_id("[POS]"), Some(TextVocab::POS));
    assert_eq!(w.token_id("[MASK]"), Some(TextVocab::MASK));
}
