mod common;

use common::oracle;
use notecode::contrastive::*;
use notecode::{Graph64, Tensor64};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn unit_rows(n: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor64 {
    Tensor64::from_vec(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn loss(t: &[Vec<f64>], d: &[Vec<f64>], tau: f64) -> f64 {
    let mut g = Graph64::new();
    let (tv, dv) = (g.constant(tensor(t)), g.constant(tensor(d)));
    let lt = g.constant(Tensor64::scalar(tau.ln()));
    let l = info_nce(&mut g, tv, dv, lt).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn uniform_similarity_gives_log_n() {
    for n in [2usize, 4, 16] {
        let same = vec![unit_rows(1, 8, 1)[0].clone(); n];
        let l = loss(&same, &same, 0.07);
        assert!((l - (n as f64).ln()).abs() < 1e-9, "N={n}: {l}");
    }
}

#[test]
fn three_pairs_match_enumeration() {
    for seed in 0..5 {
        let (t, d) = (unit_rows(3, 5, seed), unit_rows(3, 5, seed + 100));
        for tau in [0.07, 0.3, 1.0] {
            let got = loss(&t, &d, tau);
            let want = oracle::info_nce(&t, &d, tau);
            assert!((got - want).abs() < 1e-9, "seed {seed} tau {tau}: {got} vs {want}");
        }
    }
}

#[test]
fn single_pair_is_rejected() {
    let t = unit_rows(1, 4, 3);
    let mut g = Graph64::new();
    let (a, b) = (g.constant(tensor(&t)), g.constant(tensor(&t)));
    let lt = g.constant(Tensor64::scalar(0.0));
    assert!(info_nce(&mut g, a, b, lt).is_err());
}

fn combined(l: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph64::new();
    let terms: Vec<_> = l
        .iter()
        .zip(s)
        .map(|(&li, &si)| (g.constant(Tensor64::scalar(li)), g.param(Tensor64::scalar(si))))
        .collect();
    let total = combine_losses(&mut g, &terms).unwrap();
    g.backward(total).unwrap();
    let grads = terms.iter().map(|&(_, s)| g.grad(s).unwrap()[0]).collect();
    (g.value(total).item().unwrap(), grads)
}

#[test]
fn uncertainty_weighting_gradient_and_stationary_point() {
    let l = [0.7, 2.5, 0.05];
    let s = [0.3, -0.4, 1.1];
    let (_, grads) = combined(&l, &s);
    let h = 1e-6;
    for i in 0..3 {
        let (mut up, mut dn) = (s, s);
        up[i] += h;
        dn[i] -= h;
        let fd = (combined(&l, &up).0 - combined(&l, &dn).0) / (2.0 * h);
        assert!((grads[i] - fd).abs() < 1e-6, "s_{i}: {} vs {fd}", grads[i]);
    }
    let stationary: Vec<f64> = l.iter().map(|x: &f64| x.ln()).collect();
    let (_, g0) = combined(&l, &stationary);
    assert!(g0.iter().all(|g| g.abs() < 1e-12), "{g0:?}");
    let (f0, _) = combined(&l, &stationary);
    for delta in [-0.1, 0.1] {
        let moved: Vec<f64> = stationary.iter().map(|x| x + delta).collect();
        assert!(combined(&l, &moved).0 > f0);
    }
}

#[test]
fn temperature_is_clamped() {
    let cfg = DualConfig::desk(40, 12);
    let mut store = init_dual::<f64>(&cfg, 1).unwrap();
    assert!((temperature(&store).unwrap() - 0.07).abs() < 1e-12);
    store.set(LOG_TAU, Tensor64::scalar(1e-5f64.ln()));
    clamp_temperature(&mut store, &cfg.heads).unwrap();
    assert!((temperature(&store).unwrap() - 0.01).abs() < 1e-12);
    store.set(LOG_TAU, Tensor64::scalar(5.0));
    clamp_temperature(&mut store, &cfg.heads).unwrap();
    assert!((temperature(&store).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn lengthening_is_idempotent() {
    let mut cfg = DualConfig::desk(40, 12);
    cfg.text.max_len = 32;
    cfg.text.base_len = 32;
    let mut store = init_dual::<f64>(&cfg, 2).unwrap();
    stage_lengthen(&mut store, &mut cfg, 80).unwrap();
    let once = store.clone();
    stage_lengthen(&mut store, &mut cfg, 80).unwrap();
    for ((_, a), (_, b)) in once.iter().zip(store.iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(cfg.text.max_len, 80);
    assert!(stage_lengthen(&mut store, &mut cfg, 40).is_err());
}

#[test]
fn gradient_step_raises_matched_similarity() {
    let n = 6;
    let (t0, d0) = (unit_rows(n, 8, 7), unit_rows(n, 8, 8));
    let diag = |t: &[Vec<f64>], d: &[Vec<f64>]| -> f64 { (0..n).map(|i| t[i].iter().zip(&d[i]).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>() / n as f64 };
    let mut g = Graph64::new();
    let (tp, dp) = (g.param(tensor(&t0)), g.param(tensor(&d0)));
    let (tn, dn) = (g.l2_normalize(tp).unwrap(), g.l2_normalize(dp).unwrap());
    let lt = g.constant(Tensor64::scalar(0.07f64.ln()));
    let l = info_nce(&mut g, tn, dn, lt).unwrap();
    g.backward(l).unwrap();
    let step = |x: &[Vec<f64>], grad: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .enumerate()
            .map(|(i, r)| {
                let v: Vec<f64> = r.iter().enumerate().map(|(j, a)| a - 0.01 * grad[i * 8 + j]).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    };
    let (t1, d1) = (step(&t0, g.grad(tp).unwrap()), step(&d0, g.grad(dp).unwrap()));
    assert!(diag(&t1, &d1) > diag(&t0, &d0));
    assert!(loss(&t1, &d1, 0.07) < loss(&t0, &d0, 0.07));
}

proptest! {
    #[test]
    fn joint_permutation_leaves_loss_unchanged(seed in 0u64..200, shift in 1usize..5) {
        let (t, d) = (unit_rows(5, 4, seed), unit_rows(5, 4, seed + 1000));
        let perm = |x: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..5).map(|i| x[(i + shift) % 5].clone()).collect() };
        prop_assert!((loss(&t, &d, 0.2) - loss(&perm(&t), &perm(&d), 0.2)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_in_modalities(seed in 0u64..200) {
        let (t, d) = (unit_rows(4, 6, seed), unit_rows(4, 6, seed + 1000));
        prop_assert!((loss(&t, &d, 0.1) - loss(&d, &t, 0.1)).abs() < 1e-12);
    }
}
