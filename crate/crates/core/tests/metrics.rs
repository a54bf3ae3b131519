mod common;

use common::oracle;
use notecode::metrics::*;
use proptest::prelude::*;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn random_instances_match_brute_force() {
    let mut rng = common::rng(6);
    for case in 0..1000 {
        let (y_true, y_score) = oracle::instance(&mut rng);
        let l = y_true[0].len();
        let thresholds = Thresholds::Global(0.5);
        let pred = thresholds.apply(&y_score);
        let (mi, ma) = f1_scores(&y_true, &pred).unwrap();
        let (omi, oma) = oracle::f1(&y_true, &pred);
        assert!(close(mi, omi) && close(ma, oma), "case {case}: f1 {mi} {ma} vs {omi} {oma}");

        match (auc_scores(&y_true, &y_score), oracle::auc_pair(&y_true, &y_score)) {
            (Ok(a), (Some(m), Some(n))) => assert!(close(a.micro, m) && close(a.macro_, n), "case {case}: auc"),
            (Err(_), (m, n)) => assert!(m.is_none() || n.is_none(), "case {case}: spurious auc error"),
            (Ok(_), _) => panic!("case {case}: auc defined where the oracle is not"),
        }

        for k in 1..=l {
            let (p, r) = precision_recall_at_k(&y_true, &y_score, k).unwrap();
            let (op, or) = oracle::precision_recall_at(&y_true, &y_score, k);
            assert!(close(p, op) && close(r, or), "case {case}: @{k}");
        }

        let Thresholds::PerLabel(per) = select_threshold(&y_true, &y_score, ThresholdMode::PerLabel).unwrap() else {
            panic!("per-label mode returned a global threshold");
        };
        for j in 0..l {
            let t: Vec<bool> = y_true.iter().map(|r| r[j]).collect();
            let s: Vec<f64> = y_score.iter().map(|r| r[j]).collect();
            let want = oracle::best_threshold(&t, &s).unwrap_or(FALLBACK_THRESHOLD);
            assert!(close(per[j], want), "case {case}: label {j} threshold {} vs {want}", per[j]);
        }
        let Thresholds::Global(g) = select_threshold(&y_true, &y_score, ThresholdMode::Global).unwrap() else {
            panic!("global mode returned per-label thresholds");
        };
        let want = oracle::best_threshold(&y_true.concat(), &y_score.concat()).unwrap_or(FALLBACK_THRESHOLD);
        assert!(close(g, want), "case {case}: global threshold {g} vs {want}");
    }
}

#[test]
fn worked_examples() {
    let t = vec![vec![true, false], vec![false, true]];
    let (mi, ma) = f1_scores(&t, &t).unwrap();
    assert_eq!((mi, ma), (1.0, 1.0));
    let wrong = vec![vec![false, true], vec![true, false]];
    assert_eq!(f1_scores(&t, &wrong).unwrap(), (0.0, 0.0));
    assert_eq!(binary_auc(&[true, false], &[0.3, 0.3]), Some(0.5));
    assert_eq!(binary_auc(&[true, true], &[0.3, 0.1]), None);
    let s = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
    assert_eq!(precision_recall_at_k(&t, &s, 1).unwrap(), (1.0, 1.0));
}

#[test]
fn degenerate_inputs_are_errors() {
    let t = vec![vec![true], vec![true]];
    assert!(auc_scores(&t, &[vec![0.1], vec![0.2]]).is_err());
    assert!(precision_recall_at_k(&t, &[vec![0.1], vec![0.2]], 2).is_err());
    assert!(f1_scores(&t, &[vec![true]]).is_err());
    assert!(auc_scores(&[vec![true], vec![false]], &[vec![f64::NAN], vec![0.2]]).is_err());
}

#[test]
fn macro_auc_lists_excluded_labels() {
    let t = vec![vec![true, true], vec![false, true]];
    let s = vec![vec![0.9, 0.2], vec![0.1, 0.4]];
    let a = auc_scores(&t, &s).unwrap();
    assert_eq!(a.excluded, vec![1]);
    assert_eq!(a.macro_, 1.0);
}

proptest! {
    #[test]
    fn rank_metrics_ignore_monotone_transforms(seed in 0u64..500) {
        let mut rng = common::rng(seed);
        let (y_true, y_score) = oracle::instance(&mut rng);
        let warped: Vec<Vec<f64>> = y_score.iter().map(|r| r.iter().map(|&s| (3.0 * s).exp() - 7.0).collect()).collect();
        if let (Ok(a), Ok(b)) = (auc_scores(&y_true, &y_score), auc_scores(&y_true, &warped)) {
            prop_assert!(close(a.micro, b.micro) && close(a.macro_, b.macro_));
        }
        for k in 1..=y_true[0].len() {
            prop_assert_eq!(precision_recall_at_k(&y_true, &y_score, k).unwrap(), precision_recall_at_k(&y_true, &warped, k).unwrap());
        }
        let t = Thresholds::Global(0.4);
        let tw = Thresholds::Global((3.0f64 * 0.4).exp() - 7.0);
        prop_assert_eq!(t.apply(&y_score), tw.apply(&warped));
    }

    #[test]
    fn f1_is_bounded(seed in 0u64..500) {
        let mut rng = common::rng(seed);
        let (y_true, y_score) = oracle::instance(&mut rng);
        let (mi, ma) = f1_scores(&y_true, &Thresholds::Global(0.5).apply(&y_score)).unwrap();
        prop_assert!((0.0..=1.0).contains(&mi) && (0.0..=1.0).contains(&ma));
    }
}
