use super::Matrix;
use crate::error::{Mc3Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Returns the maximum over coordinates of
/// `|central - analytic| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(mut f: F, params: &Matrix, analytic: &Matrix, h: f64) -> Result<f64>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    params.same_shape(analytic)?;
    if !(h > 0.0) {
        return Err(Mc3Error::InvalidDims(format!("step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let up = f(&probe)?;
        probe.as_mut_slice()[k] = orig - h;
        let down = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Mc3Error::NonFinite(format!("objective at coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.as_slice()[k];
        let err = (numeric - a).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
