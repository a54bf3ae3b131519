//! Central-difference gradient checking in 64-bit precision.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Differences at or below this are accepted regardless of scale.
    pub abs_tol: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            abs_tol: 1e-8,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64, abs_tol: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= abs_tol {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let step = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares a supplied gradient against central differences of `eval`.
pub fn compare_gradient<F>(eval: F, points: &[Tensor<f64>], analytic: &[Vec<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != points.len() {
        return Err(Error::Invalid("one analytic gradient per input required".into()));
    }
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut out = Vec::new();
    for (input, grad) in analytic.iter().enumerate() {
        if grad.len() != points[input].numel() {
            return Err(Error::shape("grad_check", format!("gradient {input} has wrong length")));
        }
        for index in coords(grad.len(), opts.max_coords) {
            let orig = work[input].data()[index];
            let at = |w: &mut Vec<Tensor<f64>>, x: f64| -> Result<f64> {
                w[input].data_mut()[index] = x;
                eval(w).map_err(|e| Error::Autograd(format!("grad_check: evaluation failed at input {input} coordinate {index}: {e}")))
            };
            let plus = at(&mut work, orig + opts.h)?;
            let minus = at(&mut work, orig - opts.h)?;
            work[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad[index];
            out.push(CoordCheck {
                input,
                index,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric, opts.abs_tol),
            });
        }
    }
    let max_rel_err = out.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tol,
        max_rel_err,
        coords: out,
    })
}

/// Gradient check of a multi-input scalar program.
pub fn grad_check_inputs<F>(f: F, points: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |pts: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| if track { g.param(p.clone()) } else { g.constant(p.clone()) }).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Autograd("grad_check: program must return a scalar".into()));
        }
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = run(points, true)?;
    let analytic: Vec<Vec<f64>> = if g.value(out).requires_grad() {
        g.backward(out)?;
        vars.iter()
            .zip(points)
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    } else {
        points.iter().map(|p| vec![0.0; p.numel()]).collect()
    };
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, out) = run(pts, false)?;
        g.value(out).item()
    };
    compare_gradient(eval, points, &analytic, opts)
}

/// Gradient check of `f` at `point` with relative tolerance `tol`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(point), &opts)
}
