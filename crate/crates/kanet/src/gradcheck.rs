//! Central finite-difference verification of tape gradients.
//!
//! The oracle only ever calls the forward evaluation, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor: gradient pairs below this magnitude are compared
/// absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients against central differences of `loss_fn`.
///
/// `params` are the tensors being differentiated; `analytic[i]` must hold
/// the gradient for `params[i]`. `loss_fn` is re-evaluated with single
/// entries perturbed by ±h and must be a pure function of the params.
pub fn check_gradients<T, F>(
    params: &[Tensor<T>],
    analytic: &[Vec<T>],
    h: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let step = T::from_f64(h);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };

    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), params[pi].numel(), "gradient length mismatch");
        for ei in 0..grad.len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig - step;
            let down = loss_fn(&work)?;
            work[pi].data_mut()[ei] = orig;

            let fd = (up.to_f64() - down.to_f64()) / (2.0 * h);
            let ad = grad[ei].to_f64();
            let denom = fd.abs().max(ad.abs()).max(REL_FLOOR);
            let rel = (fd - ad).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
