mod common;

use std::collections::{BTreeMap, HashMap};

use notecode::data::{
    generate_cohort, load_descriptions, load_encounters, load_icd_mapping, load_notes, preprocess_text, synthetic_icd9_mapping, write_descriptions,
    write_encounters, write_icd_mapping, write_notes, Cohort, SynthConfig,
};
use rand::Rng;

fn cohort(n_patients: usize, seed: u64) -> Cohort {
    generate_cohort(
        &SynthConfig {
            n_patients,
            ..SynthConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Least-squares slope of log frequency against log rank over the ranks
/// holding the top 80% of sampled mass.
fn zipf_slope(samples: &[String]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        *counts.entry(s).or_default() += 1;
    }
    let mut freq: Vec<usize> = counts.into_values().collect();
    freq.sort_unstable_by(|a, b| b.cmp(a));
    let total = samples.len() as f64;
    let mut pts = Vec::new();
    let mut acc = 0.0;
    for (r, &f) in freq.iter().enumerate() {
        if acc >= 0.8 * total {
            break;
        }
        acc += f as f64;
        pts.push((((r + 1) as f64).ln(), (f as f64).ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn code_frequencies_follow_the_configured_zipf_law() {
    for s in [0.8, 1.0, 1.2] {
        let config = SynthConfig {
            n_patients: 400,
            zipf_exponent: s,
            ..SynthConfig::default()
        };
        let c = generate_cohort(&config, 5).unwrap();
        let all: Vec<&String> = c.patients.iter().flat_map(|p| p.encounters.iter().flat_map(|e| &e.codes)).collect();
        let mut r = common::rng(2);
        let sample: Vec<String> = (0..10_000).map(|_| all[r.random_range(0..all.len())].clone()).collect();
        let slope = zipf_slope(&sample);
        assert!((slope + s).abs() <= 0.15, "exponent {s}: slope {slope}");
    }
}

#[test]
fn mean_codes_per_sequence_matches_target() {
    let c = cohort(1000, 1);
    let mean = c.patients.iter().map(|p| p.code_count()).sum::<usize>() as f64 / c.patients.len() as f64;
    assert!((mean - 86.64).abs() <= 0.2 * 86.64, "mean {mean}");
}

#[test]
fn no_patient_below_min_encounters() {
    let c = cohort(300, 2);
    assert!(c.patients.iter().all(|p| p.encounters.len() >= 5));
}

#[test]
fn generation_is_byte_identical() {
    let a = cohort(50, 9).to_json().unwrap();
    let b = cohort(50, 9).to_json().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, cohort(50, 10).to_json().unwrap());
}

#[test]
fn notes_predict_top_condition_with_bag_of_words() {
    let c = cohort(300, 4);
    let notes = c.note_records();
    let data: Vec<(Vec<String>, usize)> = notes
        .iter()
        .map(|n| {
            let words = preprocess_text(&n.text).split(' ').map(str::to_string).collect();
            (words, c.top_condition(&n.codes).unwrap())
        })
        .collect();
    let (train, test) = data.split_at(data.len() / 2);
    // Multinomial naive Bayes with add-one smoothing.
    let mut counts: BTreeMap<usize, HashMap<&str, f64>> = BTreeMap::new();
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut priors: BTreeMap<usize, f64> = BTreeMap::new();
    let mut vocab = std::collections::HashSet::new();
    for (words, y) in train {
        *priors.entry(*y).or_default() += 1.0;
        for w in words {
            *counts.entry(*y).or_default().entry(w).or_default() += 1.0;
            *totals.entry(*y).or_default() += 1.0;
            vocab.insert(w.as_str());
        }
    }
    let v = vocab.len() as f64;
    let correct = test
        .iter()
        .filter(|(words, y)| {
            let best = priors
                .iter()
                .map(|(k, prior)| {
                    let score = prior.ln()
                        + words
                            .iter()
                            .map(|w| ((counts[k].get(w.as_str()).copied().unwrap_or(0.0) + 1.0) / (totals[k] + v)).ln())
                            .sum::<f64>();
                    (k, score)
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            best == y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.8, "accuracy {acc}");
}

#[test]
fn emitters_and_loaders_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = cohort(20, 3);
    let notes = c.note_records();
    write_notes(dir.path().join("n.jsonl"), &notes).unwrap();
    assert_eq!(load_notes(dir.path().join("n.jsonl")).unwrap(), notes);

    write_encounters(dir.path().join("e.csv"), &c.patients).unwrap();
    let loaded = load_encounters(dir.path().join("e.csv")).unwrap();
    let stripped: Vec<_> = c
        .patients
        .iter()
        .cloned()
        .map(|mut p| {
            p.encounters.iter_mut().for_each(|e| e.note_text = None);
            p
        })
        .collect();
    assert_eq!(loaded, stripped);
    write_encounters(dir.path().join("e2.csv"), &loaded).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("e.csv")).unwrap(),
        std::fs::read(dir.path().join("e2.csv")).unwrap()
    );

    write_descriptions(dir.path().join("d.tsv"), &c.descriptions).unwrap();
    assert_eq!(load_descriptions(dir.path().join("d.tsv")).unwrap(), c.descriptions);

    let m = synthetic_icd9_mapping(&c.config);
    write_icd_mapping(dir.path().join("m.csv"), &m).unwrap();
    assert_eq!(load_icd_mapping(dir.path().join("m.csv")).unwrap(), m);
}

#[test]
fn note_records_are_nonempty_after_preprocessing() {
    let c = cohort(30, 8);
    for n in c.note_records() {
        assert!(!n.codes.is_empty());
        assert!(!preprocess_text(&n.text).is_empty());
        assert!(!preprocess_text(&n.text).contains("[**"));
    }
}
