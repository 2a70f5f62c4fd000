//! Numerically stable scalar smoothing primitives.
//!
//! The softplus function `eps * ln(1 + exp(x/eps))` approximates `max(0, x)`
//! from above with a gap of at most `eps * ln 2`. All piecewise droop
//! characteristics in this crate are smoothed by composing softplus terms, so
//! the approximation error of every curve is a small multiple of `eps * ln 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("sharpness parameter must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("invalid clamp bounds: lo={lo} > hi={hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("anneal schedule must be nonempty")]
    EmptySchedule,
    #[error("anneal schedule must be strictly decreasing and positive: {0:?}")]
    BadSchedule(Vec<f64>),
    #[error("anneal schedule must end at epsilon: last={last}, epsilon={epsilon}")]
    ScheduleMismatch { last: f64, epsilon: f64 },
}

/// Sharpness parameter and annealing schedule shared by every smooth
/// approximation in the toolkit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    pub anneal_schedule: Vec<f64>,
}

impl SmoothingConfig {
    pub fn new(epsilon: f64, anneal_schedule: Vec<f64>) -> Result<Self, SmoothError> {
        let cfg = Self {
            epsilon,
            anneal_schedule,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Single-stage schedule at a fixed sharpness.
    pub fn fixed(epsilon: f64) -> Result<Self, SmoothError> {
        Self::new(epsilon, vec![epsilon])
    }

    pub fn validate(&self) -> Result<(), SmoothError> {
        if !(self.epsilon > 0.0) {
            return Err(SmoothError::NonPositiveEpsilon(self.epsilon));
        }
        if self.anneal_schedule.is_empty() {
            return Err(SmoothError::EmptySchedule);
        }
        let decreasing = self
            .anneal_schedule
            .windows(2)
            .all(|w| w[0] > w[1] && w[1] > 0.0);
        if !(self.anneal_schedule[0] > 0.0 && decreasing) {
            return Err(SmoothError::BadSchedule(self.anneal_schedule.clone()));
        }
        let last = *self.anneal_schedule.last().unwrap();
        if last != self.epsilon {
            return Err(SmoothError::ScheduleMismatch {
                last,
                epsilon: self.epsilon,
            });
        }
        Ok(())
    }
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            anneal_schedule: vec![1e-1, 1e-2, 1e-3],
        }
    }
}

fn check_eps(eps: f64) -> Result<(), SmoothError> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(SmoothError::NonPositiveEpsilon(eps))
    }
}

/// `max(0, x)`.
#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Softplus `eps * ln(1 + exp(x/eps))` in overflow-safe rearranged form.
pub fn softplus(x: f64, eps: f64) -> Result<f64, SmoothError> {
    check_eps(eps)?;
    Ok(softplus_raw(x, eps))
}

/// Derivative of softplus: the logistic `1 / (1 + exp(-x/eps))`, strictly in (0, 1).
pub fn softplus_deriv(x: f64, eps: f64) -> Result<f64, SmoothError> {
    check_eps(eps)?;
    Ok(logistic_raw(x, eps))
}

/// Smooth approximation of `clamp(y, lo, hi)`:
/// `lo + eps * ln(1 + exp((hi-lo)/eps) / (1 + exp((hi-y)/eps)))`.
///
/// Deviates from the exact clamp by at most `2 * eps * ln 2` and is strictly
/// increasing in `y`.
pub fn smooth_clamp(y: f64, lo: f64, hi: f64, eps: f64) -> Result<f64, SmoothError> {
    check_eps(eps)?;
    if lo > hi {
        return Err(SmoothError::InvalidBounds { lo, hi });
    }
    Ok(smooth_clamp_raw(y, lo, hi, eps))
}

/// d/dy of [`smooth_clamp`].
pub fn smooth_clamp_deriv(y: f64, lo: f64, hi: f64, eps: f64) -> Result<f64, SmoothError> {
    check_eps(eps)?;
    if lo > hi {
        return Err(SmoothError::InvalidBounds { lo, hi });
    }
    Ok(smooth_clamp_deriv_raw(y, lo, hi, eps))
}

/// Exact `clamp(y, lo, hi)`, the piecewise reference for [`smooth_clamp`].
#[inline]
pub fn exact_clamp(y: f64, lo: f64, hi: f64) -> f64 {
    y.max(lo).min(hi)
}

// ---------------------------------------------------------------------------
// Unchecked kernels for inner loops. Callers validate eps and bounds once at
// model-build time.
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn softplus_raw(x: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    // eps*ln(1+e^{x/eps}) = max(x,0) + eps*ln(1+e^{-|x|/eps})
    x.max(0.0) + eps * (-x.abs() / eps).exp().ln_1p()
}

#[inline]
pub(crate) fn logistic_raw(x: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let t = x / eps;
    let raw = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    // keep the open interval (0, 1) even where exp saturates in f64
    raw.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Stable log-sum-exp of `{0, a}`.
#[inline]
fn lse1(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Stable log-sum-exp of `{0, a, b}`.
#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b).max(0.0);
    m + ((-m).exp() + (a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub(crate) fn smooth_clamp_raw(y: f64, lo: f64, hi: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0 && lo <= hi);
    let a = (hi - lo) / eps;
    let b = (hi - y) / eps;
    // lo + eps*[ln(1 + e^b + e^a) - ln(1 + e^b)]
    lo + eps * (lse2(a, b) - lse1(b))
}

#[inline]
pub(crate) fn smooth_clamp_deriv_raw(y: f64, lo: f64, hi: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0 && lo <= hi);
    let a = (hi - lo) / eps;
    let b = (hi - y) / eps;
    // d/dy = e^b/(1+e^b) - e^b/(1+e^a+e^b)
    (b - lse1(b)).exp() - (b - lse2(a, b)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn relu_branches() {
        assert_eq!(relu(-2.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        assert_eq!(relu(0.0), 0.0);
    }

    #[test]
    fn softplus_reference_values() {
        // symmetry point: f(0) = eps*ln 2
        assert_relative_eq!(softplus(0.0, 0.1).unwrap(), 0.1 * LN2, max_relative = 1e-14);
        // direct evaluation of the naive formula, safe at these magnitudes
        let naive = |x: f64, eps: f64| eps * (1.0 + (x / eps).exp()).ln();
        assert_relative_eq!(
            softplus(1.0, 0.1).unwrap(),
            naive(1.0, 0.1),
            max_relative = 1e-13
        );
        assert_relative_eq!(softplus(1.0, 0.1).unwrap(), 1.0000045, max_relative = 1e-6);
        assert_relative_eq!(softplus(-1.0, 0.1).unwrap(), 4.54e-6, max_relative = 1e-3);
    }

    #[test]
    fn softplus_no_overflow() {
        // naive form overflows for x/eps ~ 1e5; stable form stays exact
        assert_eq!(softplus(1000.0, 0.01).unwrap(), 1000.0);
        assert!(softplus(1e6, 1e-3).unwrap().is_finite());
        assert_eq!(softplus(-1e6, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn softplus_rejects_bad_eps() {
        assert!(matches!(
            softplus(1.0, 0.0),
            Err(SmoothError::NonPositiveEpsilon(_))
        ));
        assert!(softplus_deriv(1.0, -0.1).is_err());
    }

    #[test]
    fn softplus_deriv_values() {
        assert_eq!(softplus_deriv(0.0, 0.5).unwrap(), 0.5);
        assert_relative_eq!(softplus_deriv(10.0, 0.01).unwrap(), 1.0, epsilon = 1e-12);
        // finite-difference oracle
        let (x, eps, h) = (0.3, 0.05, 1e-6);
        let fd = (softplus(x + h, eps).unwrap() - softplus(x - h, eps).unwrap()) / (2.0 * h);
        assert_relative_eq!(softplus_deriv(x, eps).unwrap(), fd, max_relative = 1e-8);
    }

    #[test]
    fn smooth_clamp_limits() {
        // interior point approaches identity as eps -> 0
        assert_relative_eq!(
            smooth_clamp(0.5, 0.2, 1.0, 1e-9).unwrap(),
            0.5,
            epsilon = 1e-8
        );
        let bound = 2.0 * 0.01 * LN2;
        assert!((smooth_clamp(2.0, 0.2, 1.0, 0.01).unwrap() - 1.0).abs() <= bound);
        assert!((smooth_clamp(-1.0, 0.2, 1.0, 0.01).unwrap() - 0.2).abs() <= bound);
    }

    #[test]
    fn smooth_clamp_rejects_inverted_bounds() {
        assert!(matches!(
            smooth_clamp(0.0, 1.0, 0.2, 0.01),
            Err(SmoothError::InvalidBounds { .. })
        ));
    }

    #[test]
    fn smooth_clamp_grid_bound() {
        let (lo, hi, eps) = (-0.4, 0.9, 0.01);
        let bound = 2.0 * eps * LN2 + 1e-12;
        let mut sup: f64 = 0.0;
        for i in 0..=10000 {
            let y = -3.0 + 6.0 * i as f64 / 10000.0;
            let gap = (smooth_clamp_raw(y, lo, hi, eps) - exact_clamp(y, lo, hi)).abs();
            sup = sup.max(gap);
        }
        assert!(sup <= bound, "sup gap {sup} > {bound}");
    }

    #[test]
    fn smooth_clamp_deriv_matches_fd() {
        let (lo, hi, eps) = (0.2, 1.0, 0.05);
        for &y in &[-0.5, 0.19, 0.3, 0.6, 0.99, 1.4] {
            let h = 1e-6;
            let fd = (smooth_clamp_raw(y + h, lo, hi, eps) - smooth_clamp_raw(y - h, lo, hi, eps))
                / (2.0 * h);
            let an = smooth_clamp_deriv_raw(y, lo, hi, eps);
            assert_relative_eq!(an, fd, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SmoothingConfig::default().validate().is_ok());
        assert!(SmoothingConfig::new(1e-3, vec![]).is_err());
        assert!(SmoothingConfig::new(1e-3, vec![1e-3, 1e-2]).is_err());
        assert!(SmoothingConfig::new(1e-3, vec![1e-1, 1e-2]).is_err());
        assert!(SmoothingConfig::new(-1.0, vec![-1.0]).is_err());
    }

    proptest! {
        #[test]
        fn softplus_error_band(x in -50.0..50.0f64, eps in 1e-4..1.0f64) {
            let f = softplus_raw(x, eps);
            let gap = f - relu(x);
            prop_assert!(gap >= -1e-12);
            prop_assert!(gap <= eps * LN2 + 1e-12);
        }

        #[test]
        fn softplus_increasing(t in -5.0..5.0f64, dt in 1e-3..1.0f64, eps in 1e-3..1.0f64) {
            // strict within the active region of the kink; nondecreasing far out
            let (x, d) = (t * eps, dt * eps);
            prop_assert!(softplus_raw(x + d, eps) > softplus_raw(x, eps));
            prop_assert!(softplus_raw(50.0 + d, eps) >= softplus_raw(50.0, eps));
            prop_assert!(softplus_raw(-50.0 + d, eps) >= softplus_raw(-50.0, eps));
        }

        #[test]
        fn logistic_open_interval(x in -100.0..100.0f64, eps in 1e-3..1.0f64) {
            let d = logistic_raw(x, eps);
            prop_assert!(d > 0.0 && d < 1.0);
        }

        #[test]
        fn smooth_clamp_monotone(ys in proptest::collection::vec(-5.0..5.0f64, 2..40),
                                 eps in 1e-3..0.5f64) {
            let mut ys = ys;
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let vals: Vec<f64> = ys.iter().map(|&y| smooth_clamp_raw(y, -1.0, 1.0, eps)).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }
}
