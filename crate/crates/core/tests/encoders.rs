mod common;

use notecode::code_encoder::{self, build_sequence_variants, encode_codes, sequence_for, CodeBatch, CodeEncoderConfig, EncounterSequence};
use notecode::data::{Encounter, Patient};
use notecode::nn::{Dropout, ParamStore, TransformerConfig};
use notecode::tensor::{grad_check_inputs, GradCheckOptions};
use notecode::text_encoder::{self, encode_text, extend_positions, windowed_global_attention, TextBatch, TextEncoderConfig};
use notecode::tokenize::{build_code_vocab, CodeVocab, TextVocab};
use notecode::{Graph64, Tensor64};
use rand::Rng;

fn tiny(d: usize, layers: usize) -> TransformerConfig {
    TransformerConfig {
        layers,
        heads: 2,
        d_model: d,
        d_ff: 2 * d,
        dropout: 0.0,
    }
}

fn code_vocab() -> CodeVocab {
    let counts: Vec<(String, usize)> = (0..20).map(|i| (format!("B{i:02}"), 20 - i)).collect();
    build_code_vocab(&counts, 1).unwrap()
}

fn patient(n_enc: usize, day0: i64) -> Patient {
    Patient {
        patient_id: "p1".into(),
        encounters: (0..n_enc)
            .map(|j| Encounter {
                encounter_id: format!("e{j}"),
                day: day0 + 10 * j as i64 + (j * j) as i64,
                codes: (0..=j % 3).map(|c| format!("B{:02}", (j + c) % 20)).collect(),
                note_text: None,
            })
            .collect(),
    }
}

/// Parameters with larger spread than the training initialization so that
/// every path carries signal.
fn spread<T: notecode::Scalar>(store: &ParamStore<T>, seed: u64) -> ParamStore<T> {
    let mut r = common::rng(seed);
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        let t = if k.ends_with(".gain") {
            let mut t = Tensor64::randn(v.shape(), 0.2, &mut r);
            t.data_mut().iter_mut().for_each(|x| *x += 1.0);
            t.cast()
        } else {
            Tensor64::randn(v.shape(), 0.3, &mut r).cast()
        };
        out.insert(k, t).unwrap();
    }
    out
}

fn code_setup(d: usize, layers: usize) -> (CodeEncoderConfig, ParamStore<f64>) {
    let cfg = CodeEncoderConfig {
        vocab_size: code_vocab().len(),
        transformer: tiny(d, layers),
        max_len: 64,
        offset_scale: 0.5,
    };
    let mut s = ParamStore::new();
    code_encoder::init_params(&cfg, &mut s, &mut common::rng(1)).unwrap();
    (cfg.clone(), spread(&s, 2))
}

#[test]
fn variants_cover_all_encounters_once() {
    let v = code_vocab();
    let p = patient(5, 100);
    let vars = build_sequence_variants(&p, 5, &v, 1000, &mut common::rng(3));
    let mut cur: Vec<usize> = vars.iter().map(|s| s.current_encounter).collect();
    cur.sort();
    assert_eq!(cur, vec![0, 1, 2, 3, 4]);
    for s in &vars {
        assert_eq!(s.ids, vars[0].ids);
        for i in 0..s.len() {
            assert_eq!(s.token_types[i] == 1, s.offsets[i] == 0);
        }
    }
    assert_eq!(build_sequence_variants(&p, 9, &v, 1000, &mut common::rng(3)).len(), 5);
}

#[test]
fn offsets_ignore_global_day_shift() {
    let v = code_vocab();
    for cur in 0..6 {
        assert_eq!(sequence_for(&patient(6, 0), cur, &v, 100), sequence_for(&patient(6, 12345), cur, &v, 100));
    }
}

#[test]
fn truncation_keeps_current_encounter() {
    let v = code_vocab();
    let p = patient(30, 0);
    for cur in [0, 15, 29] {
        let s = sequence_for(&p, cur, &v, 12);
        assert_eq!(s.len(), 12);
        assert!(s.token_types.contains(&1));
    }
}

#[test]
fn code_encoder_shapes_and_batch_independence() {
    let (cfg, s) = code_setup(16, 2);
    let v = code_vocab();
    let p = patient(6, 0);
    let seqs: Vec<EncounterSequence> = (0..3).map(|c| sequence_for(&p, c * 2, &v, 63)).collect();
    let (h, c) = encode_codes(&s, &cfg, &seqs).unwrap();
    let l = 1 + seqs.iter().map(|x| x.len()).max().unwrap();
    assert_eq!(h.shape(), &[3, l, 16]);
    assert_eq!(c.shape(), &[3, 16]);
    let rev: Vec<_> = seqs.iter().rev().cloned().collect();
    let (_, c2) = encode_codes(&s, &cfg, &rev).unwrap();
    for i in 0..3 {
        for (a, b) in c.row(i).iter().zip(c2.row(2 - i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // Padding does not leak: a sequence alone matches its batched output.
    let (_, alone) = encode_codes(&s, &cfg, &seqs[1..2]).unwrap();
    for (a, b) in alone.row(0).iter().zip(c.row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn out_of_vocab_id_is_an_error() {
    let (cfg, s) = code_setup(16, 1);
    let bad = EncounterSequence::single_encounter("x", &["B01"], &code_vocab());
    let bad = EncounterSequence { ids: vec![999], ..bad };
    assert!(encode_codes(&s, &cfg, &[bad]).is_err());
}

#[test]
fn code_encoder_gradients_check() {
    let (cfg, s) = code_setup(16, 2);
    let v = code_vocab();
    let seqs: Vec<_> = (0..2).map(|c| sequence_for(&patient(4, 0), c, &v, 63)).collect();
    let batch = CodeBatch::new(&seqs, &cfg).unwrap();
    let names: Vec<String> = s.iter().map(|(k, _)| k.to_string()).filter(|k| !k.contains(".mlm.")).collect();
    let points: Vec<Tensor64> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
    let proj = Tensor64::randn(&[2, 16], 1.0, &mut common::rng(5));
    let report = grad_check_inputs(
        |g: &mut Graph64, vars| {
            let mut p = s.bind_where(g, |_| false);
            for (n, &v) in names.iter().zip(vars) {
                p.insert(n.clone(), v);
            }
            let (_, cls) = code_encoder::forward(g, &p, &cfg, &batch, &mut Dropout::off())?;
            let w = g.constant(proj.clone());
            let y = g.mul(cls, w)?;
            g.sum(y, None)
        },
        &points,
        &GradCheckOptions {
            max_coords: Some(40),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

fn text_setup(d: usize, layers: usize, window: usize, max_len: usize) -> (TextEncoderConfig, ParamStore<f64>) {
    let cfg = TextEncoderConfig {
        vocab_size: 40,
        transformer: tiny(d, layers),
        base_len: max_len,
        max_len,
        window,
        global_tokens: vec![0],
        random_keys: 0,
        random_seed: 0,
    };
    let mut s = ParamStore::new();
    text_encoder::init_params(&cfg, &mut s, &mut common::rng(7)).unwrap();
    (cfg.clone(), spread(&s, 8))
}

fn random_texts(n: usize, lens: &[usize], seed: u64) -> Vec<Vec<u32>> {
    let mut r = common::rng(seed);
    (0..n)
        .map(|i| {
            let mut s = vec![TextVocab::CLS];
            s.extend((1..lens[i % lens.len()]).map(|_| r.random_range(TextVocab::NUM_SPECIAL..40)));
            s
        })
        .collect()
}

#[test]
fn text_encoder_with_full_window_matches_dense_reference() {
    let (cfg, s) = text_setup(16, 2, 64, 32);
    let texts = random_texts(3, &[12, 7, 10], 9);
    let (h, _) = encode_text(&s, &cfg, &texts).unwrap();
    let batch = TextBatch::new(&texts, &cfg).unwrap();
    let mut g = Graph64::new();
    let p = s.bind_where(&mut g, |_| false);
    let (b, l) = (batch.batch, batch.len);
    let tok = g.embedding(p.var("text.tok_emb").unwrap(), &batch.ids, &[b, l]).unwrap();
    let pos = g.slice(p.var("text.pos_emb").unwrap(), 0, 0, l).unwrap();
    let x = g.add(tok, pos).unwrap();
    let allowed: Vec<Vec<Vec<bool>>> = batch.valid.iter().map(|v| vec![v.clone(); l]).collect();
    let r = common::reference::transformer(&mut g, &p, "text.enc", x, 2, 2, &allowed).unwrap();
    let r = g.value(r);
    for bb in 0..b {
        for i in 0..l {
            if !batch.valid[bb][i] {
                continue;
            }
            for k in 0..16 {
                let idx = (bb * l + i) * 16 + k;
                assert!((h.data()[idx] - r.data()[idx]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn text_encoder_shapes_and_batch_independence() {
    let (cfg, s) = text_setup(16, 2, 2, 32);
    let texts = random_texts(4, &[9, 14, 5, 11], 4);
    let (h, c) = encode_text(&s, &cfg, &texts).unwrap();
    assert_eq!(h.shape(), &[4, 14, 16]);
    assert_eq!(c.shape(), &[4, 16]);
    let rev: Vec<_> = texts.iter().rev().cloned().collect();
    let (_, c2) = encode_text(&s, &cfg, &rev).unwrap();
    for i in 0..4 {
        for (a, b) in c.row(i).iter().zip(c2.row(3 - i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let long = random_texts(1, &[33], 1);
    assert!(encode_text(&s, &cfg, &long).is_err());
}

#[test]
fn text_encoder_gradients_check() {
    let (cfg, s) = text_setup(16, 2, 2, 16);
    let texts = random_texts(2, &[9, 6], 3);
    let batch = TextBatch::new(&texts, &cfg).unwrap();
    let names: Vec<String> = s.iter().map(|(k, _)| k.to_string()).filter(|k| !k.contains(".mlm.")).collect();
    let points: Vec<Tensor64> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
    let proj = Tensor64::randn(&[2, 9, 16], 1.0, &mut common::rng(6));
    let valid = Tensor64::from_vec(
        vec![2, 9, 16],
        batch.valid.iter().flatten().flat_map(|&v| [if v { 1.0 } else { 0.0 }; 16]).collect(),
    )
    .unwrap();
    let report = grad_check_inputs(
        |g: &mut Graph64, vars| {
            let mut p = s.bind_where(g, |_| false);
            for (n, &v) in names.iter().zip(vars) {
                p.insert(n.clone(), v);
            }
            let (h, _) = text_encoder::forward(g, &p, &cfg, &batch, &mut Dropout::off())?;
            let w = g.constant(proj.clone());
            let m = g.constant(valid.clone());
            let y = g.mul(h, w)?;
            let y = g.mul(y, m)?;
            g.sum(y, None)
        },
        &points,
        &GradCheckOptions {
            max_coords: Some(40),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn padding_columns_get_zero_weight() {
    // With V = one-hot columns, each output coordinate is the weight on that key.
    let (b, h, l) = (1, 1, 6);
    let mut r = common::rng(12);
    let q = Tensor64::randn(&[b, h, l, l], 1.0, &mut r);
    let k = Tensor64::randn(&[b, h, l, l], 1.0, &mut r);
    let mut eye = vec![0.0; l * l];
    (0..l).for_each(|i| eye[i * l + i] = 1.0);
    let v = Tensor64::from_vec(vec![b, h, l, l], eye).unwrap();
    let valid = vec![vec![true, true, true, true, false, false]];
    let out = windowed_global_attention(&q, &k, &v, 2, &[0], &valid).unwrap();
    for i in 0..l {
        let row = &out.data()[i * l..(i + 1) * l];
        assert_eq!(row[4], 0.0);
        assert_eq!(row[5], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn lengthened_table_tiles_and_preserves_outputs() {
    let (cfg, s) = text_setup(16, 1, 3, 8);
    let table = s.get("text.pos_emb").unwrap();
    let ext = extend_positions(table, 16).unwrap();
    assert_eq!(&ext.data()[8 * 16..], table.data());
    let mut s2 = s.clone();
    s2.set("text.pos_emb", ext);
    let cfg2 = TextEncoderConfig { max_len: 16, ..cfg.clone() };
    let texts = random_texts(2, &[8, 5], 2);
    let (a, _) = encode_text(&s, &cfg, &texts).unwrap();
    let (b, _) = encode_text(&s2, &cfg2, &texts).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6);
    }
}
