//! Central finite differences over parameter vectors: the independent
//! oracle used by the gradient verification suite.

use crate::models::ParamVector;

#[derive(Debug, thiserror::Error)]
pub enum FdError {
    #[error("non-finite objective value at coordinate {0}")]
    NonFinite(usize),
}

/// Central-difference gradient estimate (f(θ+heᵢ) − f(θ−heᵢ))/(2h).
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamVector) -> f64,
    theta: &ParamVector,
    h: f64,
) -> Result<ParamVector, FdError> {
    assert!(h > 0.0, "step size must be positive");
    let flat = theta.flatten();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fp = f(&theta.unflatten_like(&plus));
        let fm = f(&theta.unflatten_like(&minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FdError::NonFinite(i));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(theta.unflatten_like(&grad))
}

/// Worst relative error between two gradients, with an absolute floor so
/// near-zero coordinates do not blow up the ratio.
pub fn worst_rel_error(a: &ParamVector, b: &ParamVector) -> f64 {
    let (fa, fb) = (a.flatten(), b.flatten());
    assert_eq!(fa.len(), fb.len());
    fa.iter()
        .zip(fb.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
