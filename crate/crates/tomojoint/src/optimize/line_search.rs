//! Step-length selection: strong Wolfe bracketing with cubic Hermite
//! interpolation, plus plain Armijo backtracking.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearchKind {
    StrongWolfe,
    Backtracking,
}

#[inline]
fn sane(v: f64) -> f64 {
    // Non-finite trial values behave like +inf so the search retreats
    // toward the known-good region instead of propagating NaN.
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizer of the cubic Hermite interpolant through (a, fa, da) and
/// (b, fb, db), or None when it is not usable.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() {
        Some(t)
    } else {
        None
    }
}

/// Strong Wolfe search over phi(tau) -> (value, slope). Returns the
/// accepted (tau, value); the accepted tau is always the last one phi was
/// evaluated at, which lets callers reuse trial-point state.
pub(crate) fn strong_wolfe<F>(
    mut phi: F,
    phi0: f64,
    dphi0: f64,
    tau0: f64,
    c1: f64,
    c2: f64,
    max_trials: usize,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    let mut trials = 0usize;
    let mut eval = |tau: f64, trials: &mut usize| -> Result<(f64, f64)> {
        *trials += 1;
        let (v, d) = phi(tau)?;
        Ok((sane(v), d))
    };

    // Bracketing stage: expand until the minimum is straddled.
    let mut tau_prev = 0.0f64;
    let mut f_prev = phi0;
    let mut d_prev = dphi0;
    let mut tau = tau0.max(f64::MIN_POSITIVE);
    let (mut lo, mut f_lo, mut d_lo, mut hi, mut f_hi, mut d_hi);
    loop {
        if trials >= max_trials {
            return Err(Error::LineSearchFailure { trials });
        }
        let (f, d) = eval(tau, &mut trials)?;
        if f > phi0 + c1 * tau * dphi0 || (trials > 1 && f >= f_prev) {
            lo = tau_prev;
            f_lo = f_prev;
            d_lo = d_prev;
            hi = tau;
            f_hi = f;
            d_hi = d;
            break;
        }
        if d.abs() <= -c2 * dphi0 {
            return Ok((tau, f));
        }
        if d >= 0.0 {
            lo = tau;
            f_lo = f;
            d_lo = d;
            hi = tau_prev;
            f_hi = f_prev;
            d_hi = d_prev;
            break;
        }
        tau_prev = tau;
        f_prev = f;
        d_prev = d;
        tau *= 2.0;
        if !tau.is_finite() {
            return Err(Error::LineSearchFailure { trials });
        }
    }

    // Zoom stage: lo always satisfies sufficient decrease with the lowest
    // value seen; the minimum stays inside [lo, hi] (order-free).
    loop {
        if trials >= max_trials {
            return Err(Error::LineSearchFailure { trials });
        }
        let width = (hi - lo).abs();
        if width <= 1e-16 * lo.abs().max(1.0) {
            return Err(Error::LineSearchFailure { trials });
        }
        let mut t = cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi).unwrap_or(0.5 * (lo + hi));
        // Keep the trial strictly inside the bracket.
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let margin = 0.05 * width;
        if !(t > a + margin && t < b - margin) {
            t = 0.5 * (lo + hi);
        }
        let (f, d) = eval(t, &mut trials)?;
        if f > phi0 + c1 * t * dphi0 || f >= f_lo {
            hi = t;
            f_hi = f;
            d_hi = d;
        } else {
            if d.abs() <= -c2 * dphi0 {
                return Ok((t, f));
            }
            if d * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                d_hi = d_lo;
            }
            lo = t;
            f_lo = f;
            d_lo = d;
        }
    }
}

/// Armijo backtracking over value-only phi: halves tau0 until the
/// sufficient-decrease condition holds.
pub(crate) fn backtracking<F>(
    mut phi: F,
    phi0: f64,
    dphi0: f64,
    tau0: f64,
    c1: f64,
    max_trials: usize,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut tau = tau0;
    for trial in 1..=max_trials {
        let f = sane(phi(tau)?);
        if f <= phi0 + c1 * tau * dphi0 {
            return Ok((tau, f));
        }
        if trial == max_trials {
            break;
        }
        tau *= 0.5;
    }
    Err(Error::LineSearchFailure { trials: max_trials })
}

/// One-dimensional search over phi(tau) -> (value, slope): returns a step
/// satisfying the strong Wolfe conditions or, in backtracking mode, the
/// Armijo condition by halving from tau0. phi is also consulted at 0 for
/// the reference value and slope, which must be a descent slope.
pub fn line_search<F>(
    mut phi: F,
    tau0: f64,
    mode: LineSearchKind,
    c1: f64,
    c2: f64,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
        return Err(Error::InvalidParameter(
            "wolfe constants need 0 < c1 < c2 < 1".into(),
        ));
    }
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(Error::InvalidParameter(
            "initial step must be positive and finite".into(),
        ));
    }
    let (phi0, dphi0) = phi(0.0)?;
    if !(dphi0 < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "line search needs a descent direction, slope at 0 is {dphi0}"
        )));
    }
    match mode {
        LineSearchKind::StrongWolfe => {
            strong_wolfe(&mut phi, phi0, dphi0, tau0, c1, c2, 40).map(|(t, _)| t)
        }
        LineSearchKind::Backtracking => {
            backtracking(|t| phi(t).map(|(v, _)| v), phi0, dphi0, tau0, c1, 40)
                .map(|(t, _)| t)
        }
    }
}
