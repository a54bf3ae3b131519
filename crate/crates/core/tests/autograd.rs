mod common;

use notecode::tensor::{compare_gradient, grad_check, grad_check_inputs, GradCheckOptions, OpKind};
use notecode::{Graph32, Graph64, Tensor32, Tensor64};
use proptest::prelude::*;

#[test]
fn every_op_matches_central_differences() {
    let opts = GradCheckOptions::default();
    for case in common::gradcases::cases(0..5) {
        let report = grad_check_inputs(&case.program, &case.inputs, &opts).unwrap();
        assert!(report.passed, "{}: max rel err {:e}", case.name, report.max_rel_err);
    }
}

#[test]
fn scaled_gradient_is_caught() {
    let opts = GradCheckOptions::default();
    for case in common::gradcases::cases(0..3) {
        let mut g = Graph64::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (case.program)(&mut g, &vars).unwrap();
        g.backward(out).unwrap();
        let scaled: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().iter().map(|x| x * 1.01).collect()).collect();
        let eval = |pts: &[Tensor64]| {
            let mut g = Graph64::new();
            let vars: Vec<_> = pts.iter().map(|t| g.constant(t.clone())).collect();
            let out = (case.program)(&mut g, &vars)?;
            g.value(out).item()
        };
        let report = compare_gradient(eval, &case.inputs, &scaled, &opts).unwrap();
        assert!(!report.passed, "{} accepted a 1% gradient error", case.name);
    }
}

#[test]
fn constant_program_passes_with_zero_gradients() {
    let point = Tensor64::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let report = grad_check(
        |g, x| {
            let zero = g.scale(x, 0.0)?;
            g.sum(zero, None)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.coords.iter().all(|c| c.analytic == 0.0 && c.numeric == 0.0));
}

#[test]
fn failing_evaluation_reports_coordinate() {
    // exp(1e5 * x) overflows only when coordinate 1 is nudged upward.
    let point = Tensor64::from_vec(vec![2], vec![0.0, 0.0070978]).unwrap();
    let err = grad_check(
        |g, x| {
            let y = g.scale(x, 1e5)?;
            let e = g.exp(y)?;
            g.sum(e, None)
        },
        &point,
        1e-4,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("coordinate 1"), "{err}");
}

#[test]
fn apply_dispatches_op_kinds() {
    let mut g = Graph64::new();
    let a = g.constant(Tensor64::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = g.constant(Tensor64::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = g.apply(OpKind::MatMul, &[a, eye]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    let s = g.apply(OpKind::Softmax { axis: 1 }, &[c]).unwrap();
    assert_eq!(g.shape(s), &[2, 2]);
    assert!(g.apply(OpKind::Gelu, &[a, eye]).is_err());
}

fn run_forward(seed: u64) -> Vec<f32> {
    let mut r = common::rng(seed);
    let mut g = Graph32::new();
    let x = g.param(Tensor32::randn(&[33, 40], 1.0, &mut r));
    let w = g.param(Tensor32::randn(&[40, 50], 0.2, &mut r));
    let y = g.matmul(x, w).unwrap();
    let y = g.gelu(y).unwrap();
    let y = g.layer_norm(y, 1, 1e-5).unwrap();
    let y = g.softmax(y, 1).unwrap();
    let loss = g.mean(y, None).unwrap();
    g.backward(loss).unwrap();
    let mut out = g.value(y).data().to_vec();
    out.extend_from_slice(g.grad(w).unwrap());
    out
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let a = run_forward(3);
    let b = run_forward(3);
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph64::new();
        let x = g.constant(Tensor64::from_vec(vec![3, 4], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(data in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(data[..4].iter().any(|x| x.abs() > 1e-3) && data[4..].iter().any(|x| x.abs() > 1e-3));
        let mut g = Graph64::new();
        let x = g.constant(Tensor64::from_vec(vec![2, 4], data).unwrap());
        let y = g.l2_normalize(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
