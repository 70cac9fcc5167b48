//! Finite-difference gradient verification.
//!
//! Used by the test suites to validate every backward rule against central
//! differences. Run with `f64` so the step size can stay small.

use ndarray::ArrayD;

use super::scalar::Scalar;

/// Outcome of a gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `f` maps a set of input tensors to a scalar loss; `analytic` holds one
/// gradient tensor per input (same shapes). The relative error of entry `j`
/// is `|a - n| / max(1, |a|, |n|)`, which keeps tiny gradients from blowing
/// up the ratio.
/// Relative error of a single analytic/numeric gradient pair.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / denom
}

pub fn finite_diff<S: Scalar>(
    f: &dyn Fn(&[ArrayD<S>]) -> S,
    inputs: &[ArrayD<S>],
    analytic: &[ArrayD<S>],
    step: f64,
) -> GradCheck {
    assert_eq!(inputs.len(), analytic.len());
    let h = S::from_f(step);
    let two_h = S::from_f(2.0 * step);
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
    };
    let mut work: Vec<ArrayD<S>> = inputs.to_vec();
    for (ii, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[ii].shape());
        let n = inputs[ii].len();
        for j in 0..n {
            let orig = work[ii].as_slice().unwrap()[j];
            work[ii].as_slice_mut().unwrap()[j] = orig + h;
            let up = f(&work);
            work[ii].as_slice_mut().unwrap()[j] = orig - h;
            let down = f(&work);
            work[ii].as_slice_mut().unwrap()[j] = orig;
            let numeric = ((up - down) / two_h).to_f();
            let a = grad.as_slice().unwrap()[j].to_f();
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: rel,
                    worst_input: ii,
                    worst_index: j,
                };
            }
        }
    }
    worst
}
