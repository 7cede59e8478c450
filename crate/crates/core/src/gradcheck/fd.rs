//! Central finite differences that refuse to straddle a discontinuity.
//!
//! The rendering pipeline is piecewise smooth: contribution cutoffs, culling,
//! sort order and mask thresholds switch between smooth branches. Every
//! probed function returns a branch signature next to its value; a
//! difference quotient is only accepted when both probes land on the same
//! branch as the base point, shrinking the step until they do.

/// Value of a probed scalar function and the signature of its smooth branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

/// Number of step reductions (each by 10×) tried before giving up.
pub const MAX_STEP_REDUCTIONS: usize = 4;

/// Central difference of `f` around 0 with initial step `h`.
///
/// Returns `None` when no step down to `h / 10^MAX_STEP_REDUCTIONS` keeps
/// both probes on the base branch.
pub fn central_difference(f: impl Fn(f64) -> Probe, h: f64) -> Option<f64> {
    let base = f(0.0).signature;
    let mut step = h;
    for _ in 0..=MAX_STEP_REDUCTIONS {
        let plus = f(step);
        let minus = f(-step);
        if plus.signature == base && minus.signature == base {
            return Some((plus.value - minus.value) / (2.0 * step));
        }
        step *= 0.1;
    }
    None
}

/// Relative/absolute agreement test used by every gradient check.
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    if !diff.is_finite() {
        return false;
    }
    diff <= abs_tol || diff <= rel_tol * analytic.abs().max(numeric.abs())
}

/// Relative error with an absolute floor, for reporting.
pub fn relative_error(analytic: f64, numeric: f64, abs_tol: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_tol)
}
