//! Central finite-difference verification of reverse-mode gradients.

use super::{Graph, NodeId, Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("grad_check requires a scalar-valued computation, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// Worst-coordinate summary of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Analytic and central-difference gradients at the worst coordinate.
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative error with a small absolute floor so coordinates whose true
/// gradient is ~0 are compared absolutely instead of blowing up.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` must be a pure graph builder returning a scalar node from leaves
/// created in `inputs` order; it is re-evaluated twice per input coordinate
/// with step `h` (default choice 1e-5 in double precision).
pub fn grad_check<F: Scalar>(
    inputs: &[Tensor<F>],
    f: impl Fn(&mut Graph<F>, &[NodeId]) -> NodeId,
    h: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let eval = |tensors: &[Tensor<F>]| -> (f64, Option<Vec<Vec<f64>>>, Vec<usize>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                g.leaf(&t)
            })
            .collect();
        let out = f(&mut g, &ids);
        let shape = g.shape(out).to_vec();
        if g.values(out).len() != 1 {
            return (f64::NAN, None, shape);
        }
        let loss = g.scalar_value(out).to_f64();
        g.backward(out, F::one());
        let grads = ids
            .iter()
            .map(|id| g.grad(*id).unwrap().iter().map(|v| v.to_f64()).collect())
            .collect();
        (loss, Some(grads), shape)
    };

    let (_, analytic, shape) = eval(inputs);
    let analytic = analytic.ok_or(GradCheckError::NonScalar(shape))?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for c in 0..grads.len() {
            let base = work[k].values[c];
            work[k].values[c] = base + F::from_f64(h);
            let plus = eval(&work).0;
            work[k].values[c] = base - F::from_f64(h);
            let minus = eval(&work).0;
            work[k].values[c] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[c];
            let rel = rel_err(a, numeric);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        }
    }
    Ok(report)
}

/// Finite-difference check against precomputed analytic gradients, for
/// whole models whose weights live in named parameters.
///
/// `analytic[k][c]` is the reverse-mode gradient of parameter `k`,
/// coordinate `c`; `loss_with_delta(k, c, d)` must evaluate the loss with
/// that single coordinate shifted by `d` (typically on a clone of the
/// model).
pub fn grad_check_against(
    analytic: &[Vec<f64>],
    mut loss_with_delta: impl FnMut(usize, usize, f64) -> f64,
    h: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (k, grads) in analytic.iter().enumerate() {
        for (c, &a) in grads.iter().enumerate() {
            let plus = loss_with_delta(k, c, h);
            let minus = loss_with_delta(k, c, -h);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = rel_err(a, numeric);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        }
    }
    report
}
