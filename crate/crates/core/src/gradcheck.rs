//! Central finite-difference gradient oracle.
//!
//! Independent of the graph: it only evaluates the loss as a black box.

use crate::tensor::Tensor;

/// Worst relative disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Central differences of `loss` with respect to every element of `params`.
pub fn numeric_gradients<F>(params: &mut [Tensor], h: f64, mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + h;
            let up = loss(params);
            params[p].data_mut()[i] = orig - h;
            let down = loss(params);
            params[p].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Fourth-order five-point differences. Truncation error is O(h⁴), so a
/// larger `h` can be used and entries far below the gradient's scale stay
/// above roundoff.
pub fn numeric_gradients_5pt<F>(params: &mut [Tensor], h: f64, mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            let mut at = |d: f64, params: &mut [Tensor]| {
                params[p].data_mut()[i] = orig + d;
                loss(params)
            };
            let (f2, f1, b1, b2) = (at(2.0 * h, params), at(h, params), at(-h, params), at(-2.0 * h, params));
            params[p].data_mut()[i] = orig;
            g[i] = (-f2 + 8.0 * f1 - 8.0 * b1 + b2) / (12.0 * h);
        }
        out.push(g);
    }
    out
}

/// Compares gradients elementwise, ignoring entries where both sides are
/// below `floor` in magnitude.
pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient length mismatch");
        for (&x, &y) in a.iter().zip(n) {
            let scale = x.abs().max(y.abs());
            if scale < floor {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max((x - y).abs() / scale);
        }
    }
    report
}
