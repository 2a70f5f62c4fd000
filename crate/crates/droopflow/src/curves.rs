//! Exact piecewise and smooth droop characteristics with analytic derivatives.
//!
//! Every curve comes in two variants: the exact piecewise evaluator (the
//! oracle) and a smooth approximation built from softplus terms whose
//! deviation from the exact curve is bounded by `N * eps * ln 2`, where `N`
//! is the number of softplus terms (2 for clamp-type curves, 4 for
//! deadband-type curves).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smooth::{
    exact_clamp, logistic_raw, smooth_clamp_deriv_raw, smooth_clamp_raw, softplus_raw, SmoothError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("invalid droop spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Smooth(#[from] SmoothError),
    #[error("voltage margin out of bounds: {0}")]
    MarginOutOfBounds(String),
    #[error("curve table grid must be nonempty and sorted")]
    BadGrid,
    #[error("curve table needs at least one sharpness value")]
    EmptyEpsList,
}

fn check_eps(eps: f64) -> Result<(), CurveError> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(SmoothError::NonPositiveEpsilon(eps).into())
    }
}

/// Sign of a reference power, with `zeta(0) := +1` by convention.
#[inline]
pub fn zeta(p_ref: f64) -> f64 {
    if p_ref < 0.0 {
        -1.0
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Generator active-power contingency response
// ---------------------------------------------------------------------------

/// Post-contingency generator active-power response: ramps from `p_base` with
/// participation factor `alpha` until it saturates at the dispatch bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenPResponseSpec {
    pub p_base: f64,
    pub alpha: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl GenPResponseSpec {
    pub fn validate(&self) -> Result<(), CurveError> {
        if !(self.p_min <= self.p_base && self.p_base <= self.p_max) {
            return Err(CurveError::InvalidSpec(format!(
                "generator response requires p_min <= p_base <= p_max, got {} / {} / {}",
                self.p_min, self.p_base, self.p_max
            )));
        }
        if self.alpha < 0.0 {
            return Err(CurveError::InvalidSpec(format!(
                "participation factor must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn gen_p_exact(spec: &GenPResponseSpec, delta: f64) -> f64 {
    exact_clamp(spec.p_base + spec.alpha * delta, spec.p_min, spec.p_max)
}

pub fn gen_p_smooth(spec: &GenPResponseSpec, delta: f64, eps: f64) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(gen_p_smooth_raw(spec, delta, eps))
}

/// d/d(delta) of [`gen_p_smooth`].
pub fn gen_p_smooth_deriv(spec: &GenPResponseSpec, delta: f64, eps: f64) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(gen_p_smooth_deriv_raw(spec, delta, eps))
}

#[inline]
pub(crate) fn gen_p_smooth_raw(spec: &GenPResponseSpec, delta: f64, eps: f64) -> f64 {
    smooth_clamp_raw(
        spec.p_base + spec.alpha * delta,
        spec.p_min,
        spec.p_max,
        eps,
    )
}

#[inline]
pub(crate) fn gen_p_smooth_deriv_raw(spec: &GenPResponseSpec, delta: f64, eps: f64) -> f64 {
    spec.alpha
        * smooth_clamp_deriv_raw(
            spec.p_base + spec.alpha * delta,
            spec.p_min,
            spec.p_max,
            eps,
        )
}

// ---------------------------------------------------------------------------
// Generator PV/PQ switching (smooth voltage equation with margin variables)
// ---------------------------------------------------------------------------

/// Generator reactive-power / voltage switching behavior: the bus voltage is
/// held at `v_base` while reactive power is within limits, and released once a
/// limit binds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenQVSpec {
    pub v_base: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl GenQVSpec {
    pub fn validate(&self) -> Result<(), CurveError> {
        if !(self.q_min <= self.q_max) {
            return Err(CurveError::InvalidSpec(format!(
                "q_min {} > q_max {}",
                self.q_min, self.q_max
            )));
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_base && self.v_base <= self.v_max) {
            return Err(CurveError::InvalidSpec(format!(
                "voltage setpoint {} outside [{}, {}]",
                self.v_base, self.v_min, self.v_max
            )));
        }
        Ok(())
    }

    pub fn check_margins(&self, v_plus: f64, v_minus: f64) -> Result<(), CurveError> {
        let tol = 1e-12;
        if v_plus < -tol || v_plus > self.v_max - self.v_base + tol {
            return Err(CurveError::MarginOutOfBounds(format!(
                "v_plus {} outside [0, {}]",
                v_plus,
                self.v_max - self.v_base
            )));
        }
        if v_minus < -tol || v_minus > self.v_base - self.v_min + tol {
            return Err(CurveError::MarginOutOfBounds(format!(
                "v_minus {} outside [0, {}]",
                v_minus,
                self.v_base - self.v_min
            )));
        }
        Ok(())
    }
}

/// Right-hand side of the post-contingency voltage equality
/// `V = v_base + softplus(v_plus - q + q_min) - softplus(v_minus + q - q_max)`.
pub fn gen_qv_smooth_voltage(
    spec: &GenQVSpec,
    q: f64,
    v_plus: f64,
    v_minus: f64,
    eps: f64,
) -> Result<f64, CurveError> {
    check_eps(eps)?;
    spec.check_margins(v_plus, v_minus)?;
    Ok(gen_qv_smooth_voltage_raw(spec, q, v_plus, v_minus, eps))
}

#[inline]
pub(crate) fn gen_qv_smooth_voltage_raw(
    spec: &GenQVSpec,
    q: f64,
    v_plus: f64,
    v_minus: f64,
    eps: f64,
) -> f64 {
    spec.v_base + softplus_raw(v_plus - q + spec.q_min, eps)
        - softplus_raw(v_minus + q - spec.q_max, eps)
}

// ---------------------------------------------------------------------------
// Converter P-Vdc linear droop
// ---------------------------------------------------------------------------

/// Linear converter droop: dc power follows a line in dc voltage, saturating
/// at the voltage bounds and at the converter power capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PVdcLinearSpec {
    pub p_ref: f64,
    pub v_ref: f64,
    pub k_droop: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl PVdcLinearSpec {
    pub fn validate(&self) -> Result<(), CurveError> {
        if !(self.k_droop > 0.0) {
            return Err(CurveError::InvalidSpec(format!(
                "droop coefficient must be positive, got {}",
                self.k_droop
            )));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max) {
            return Err(CurveError::InvalidSpec(format!(
                "voltage bounds require 0 < v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if !(self.v_min <= self.v_ref && self.v_ref <= self.v_max) {
            return Err(CurveError::InvalidSpec(format!(
                "v_ref {} outside [{}, {}]",
                self.v_ref, self.v_min, self.v_max
            )));
        }
        if !(self.p_min <= self.p_ref && self.p_ref <= self.p_max) {
            return Err(CurveError::InvalidSpec(format!(
                "p_ref {} outside [{}, {}]",
                self.p_ref, self.p_min, self.p_max
            )));
        }
        Ok(())
    }

    /// Unsaturated droop line `P(V) = p_ref - zeta/k * (V - v_ref)`.
    #[inline]
    pub fn line(&self, v_dc: f64) -> f64 {
        self.p_ref - zeta(self.p_ref) / self.k_droop * (v_dc - self.v_ref)
    }

    #[inline]
    fn line_slope(&self) -> f64 {
        -zeta(self.p_ref) / self.k_droop
    }

    /// Effective power bounds: droop line values at the voltage bounds,
    /// tightened by the converter capability.
    pub fn power_bounds(&self) -> (f64, f64) {
        let pa = self.line(self.v_min);
        let pb = self.line(self.v_max);
        let lo = pa.min(pb).max(self.p_min);
        let hi = pa.max(pb).min(self.p_max);
        (lo, hi)
    }
}

pub fn pvdc_linear_exact(spec: &PVdcLinearSpec, v_dc: f64) -> f64 {
    let (lo, hi) = spec.power_bounds();
    exact_clamp(spec.line(v_dc), lo, hi)
}

pub fn pvdc_linear_smooth(spec: &PVdcLinearSpec, v_dc: f64, eps: f64) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(pvdc_linear_smooth_raw(spec, v_dc, eps))
}

pub fn pvdc_linear_smooth_deriv(
    spec: &PVdcLinearSpec,
    v_dc: f64,
    eps: f64,
) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(pvdc_linear_smooth_deriv_raw(spec, v_dc, eps))
}

/// Smooth clamp of the droop line, oriented by the sign of the reference
/// power: the composition is negated for a positive reference so that
/// mirrored specs produce exactly mirrored curves.
#[inline]
pub(crate) fn pvdc_linear_smooth_raw(spec: &PVdcLinearSpec, v_dc: f64, eps: f64) -> f64 {
    let (lo, hi) = spec.power_bounds();
    let p = spec.line(v_dc);
    if spec.p_ref < 0.0 {
        smooth_clamp_raw(p, lo, hi, eps)
    } else {
        -smooth_clamp_raw(-p, -hi, -lo, eps)
    }
}

#[inline]
pub(crate) fn pvdc_linear_smooth_deriv_raw(spec: &PVdcLinearSpec, v_dc: f64, eps: f64) -> f64 {
    let (lo, hi) = spec.power_bounds();
    let p = spec.line(v_dc);
    let slope = spec.line_slope();
    if spec.p_ref < 0.0 {
        smooth_clamp_deriv_raw(p, lo, hi, eps) * slope
    } else {
        smooth_clamp_deriv_raw(-p, -hi, -lo, eps) * slope
    }
}

// ---------------------------------------------------------------------------
// Deadband droop (P-Vdc and Q-Vac share the same shape)
// ---------------------------------------------------------------------------

/// Five-segment deadband droop: constant power inside `[db_lo, db_hi]`,
/// slope `-1/k_droop` between deadband and voltage bounds, slope `-1/k_outer`
/// beyond the voltage bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PVdcDeadbandSpec {
    pub p_ref: f64,
    pub k_droop: f64,
    /// Slope coefficient of the outermost segments. Defaults to `k_droop`,
    /// which collapses the outer breakpoints to a single slope.
    #[serde(default)]
    pub k_outer: Option<f64>,
    pub db_lo: f64,
    pub db_hi: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl PVdcDeadbandSpec {
    pub fn validate(&self) -> Result<(), CurveError> {
        if !(self.k_droop > 0.0) {
            return Err(CurveError::InvalidSpec(format!(
                "droop coefficient must be positive, got {}",
                self.k_droop
            )));
        }
        if let Some(k) = self.k_outer {
            if !(k > 0.0) {
                return Err(CurveError::InvalidSpec(format!(
                    "outer slope coefficient must be positive, got {k}"
                )));
            }
        }
        if !(self.v_min > 0.0
            && self.v_min < self.db_lo
            && self.db_lo < self.db_hi
            && self.db_hi < self.v_max)
        {
            return Err(CurveError::InvalidSpec(format!(
                "deadband voltages require 0 < v_min < db_lo < db_hi < v_max, got {} < {} < {} < {}",
                self.v_min, self.db_lo, self.db_hi, self.v_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn k_outer_or_default(&self) -> f64 {
        self.k_outer.unwrap_or(self.k_droop)
    }

    pub(crate) fn shape(&self) -> DeadbandShape {
        DeadbandShape {
            k: self.k_droop,
            k_outer: self.k_outer_or_default(),
            db_lo: self.db_lo,
            db_hi: self.db_hi,
            v_min: self.v_min,
            v_max: self.v_max,
        }
    }
}

/// Q-Vac droop adaptation of the deadband curve: same functional form with
/// reactive power in place of dc power and the ac bus voltage as input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QVacSpec {
    pub q_ref: f64,
    pub v_ref: f64,
    pub k_droop: f64,
    #[serde(default)]
    pub k_outer: Option<f64>,
    pub db_lo: f64,
    pub db_hi: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl QVacSpec {
    pub fn validate(&self) -> Result<(), CurveError> {
        self.as_deadband().validate()?;
        if !(self.v_min <= self.v_ref && self.v_ref <= self.v_max) {
            return Err(CurveError::InvalidSpec(format!(
                "v_ref {} outside [{}, {}]",
                self.v_ref, self.v_min, self.v_max
            )));
        }
        Ok(())
    }

    pub fn as_deadband(&self) -> PVdcDeadbandSpec {
        PVdcDeadbandSpec {
            p_ref: self.q_ref,
            k_droop: self.k_droop,
            k_outer: self.k_outer,
            db_lo: self.db_lo,
            db_hi: self.db_hi,
            v_min: self.v_min,
            v_max: self.v_max,
        }
    }

    /// Linear (deadband-free) variant anchored at `v_ref`, saturating only at
    /// the voltage bounds. Used by the scenario toggles that enable Q-Vac
    /// droop without a deadband.
    pub fn as_linear(&self) -> PVdcLinearSpec {
        // wide capability bounds: saturation comes from the voltage limits
        let span = 1e3;
        PVdcLinearSpec {
            p_ref: self.q_ref,
            v_ref: self.v_ref,
            k_droop: self.k_droop,
            v_min: self.v_min,
            v_max: self.v_max,
            p_min: self.q_ref - span,
            p_max: self.q_ref + span,
        }
    }
}

/// Shared geometry of the deadband response, expressed as the droop offset
/// `delta(v)` added to (sign `-1`) or subtracted from (sign `+1`) the
/// reference power.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DeadbandShape {
    pub k: f64,
    pub k_outer: f64,
    pub db_lo: f64,
    pub db_hi: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl DeadbandShape {
    /// Exact droop offset: continuous, piecewise linear, nonincreasing in `v`.
    pub fn delta_exact(&self, v: f64) -> f64 {
        if v >= self.v_max {
            (self.v_max - v) / self.k_outer + (self.db_hi - self.v_max) / self.k
        } else if v >= self.db_hi {
            (self.db_hi - v) / self.k
        } else if v >= self.db_lo {
            0.0
        } else if v >= self.v_min {
            (self.db_lo - v) / self.k
        } else {
            (self.v_min - v) / self.k_outer + (self.db_lo - self.v_min) / self.k
        }
    }

    /// Softplus composition of [`Self::delta_exact`]. Slope coefficients live
    /// inside the softplus arguments (`c * relu(x) = relu(c * x)`), keeping
    /// the absolute approximation error at `eps * ln 2` per term.
    pub fn delta_smooth(&self, v: f64, eps: f64) -> f64 {
        let mut low = softplus_raw((self.db_lo - v) / self.k, eps);
        let mut high = softplus_raw((v - self.db_hi) / self.k, eps);
        if self.k_outer != self.k {
            low += softplus_raw((self.v_min - v) / self.k_outer, eps)
                - softplus_raw((self.v_min - v) / self.k, eps);
            high += softplus_raw((v - self.v_max) / self.k_outer, eps)
                - softplus_raw((v - self.v_max) / self.k, eps);
        }
        low - high
    }

    /// d/dv of [`Self::delta_smooth`].
    pub fn delta_smooth_deriv(&self, v: f64, eps: f64) -> f64 {
        let mut d = -logistic_raw((self.db_lo - v) / self.k, eps) / self.k
            - logistic_raw((v - self.db_hi) / self.k, eps) / self.k;
        if self.k_outer != self.k {
            d += -logistic_raw((self.v_min - v) / self.k_outer, eps) / self.k_outer
                + logistic_raw((self.v_min - v) / self.k, eps) / self.k
                - logistic_raw((v - self.v_max) / self.k_outer, eps) / self.k_outer
                + logistic_raw((v - self.v_max) / self.k, eps) / self.k;
        }
        d
    }

    /// Number of softplus terms in the smooth composition, for error bounds.
    pub fn softplus_terms(&self) -> usize {
        if self.k_outer == self.k {
            2
        } else {
            6
        }
    }
}

pub fn pvdc_deadband_exact(spec: &PVdcDeadbandSpec, v_dc: f64) -> f64 {
    let delta = spec.shape().delta_exact(v_dc);
    spec.p_ref - zeta(spec.p_ref) * delta
}

pub fn pvdc_deadband_smooth(
    spec: &PVdcDeadbandSpec,
    v_dc: f64,
    eps: f64,
) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(pvdc_deadband_smooth_raw(spec, v_dc, eps))
}

pub fn pvdc_deadband_smooth_deriv(
    spec: &PVdcDeadbandSpec,
    v_dc: f64,
    eps: f64,
) -> Result<f64, CurveError> {
    check_eps(eps)?;
    Ok(pvdc_deadband_smooth_deriv_raw(spec, v_dc, eps))
}

#[inline]
pub(crate) fn pvdc_deadband_smooth_raw(spec: &PVdcDeadbandSpec, v_dc: f64, eps: f64) -> f64 {
    spec.p_ref - zeta(spec.p_ref) * spec.shape().delta_smooth(v_dc, eps)
}

#[inline]
pub(crate) fn pvdc_deadband_smooth_deriv_raw(spec: &PVdcDeadbandSpec, v_dc: f64, eps: f64) -> f64 {
    -zeta(spec.p_ref) * spec.shape().delta_smooth_deriv(v_dc, eps)
}

pub fn qvac_exact(spec: &QVacSpec, v_ac: f64) -> f64 {
    pvdc_deadband_exact(&spec.as_deadband(), v_ac)
}

pub fn qvac_smooth(spec: &QVacSpec, v_ac: f64, eps: f64) -> Result<f64, CurveError> {
    pvdc_deadband_smooth(&spec.as_deadband(), v_ac, eps)
}

pub fn qvac_smooth_deriv(spec: &QVacSpec, v_ac: f64, eps: f64) -> Result<f64, CurveError> {
    pvdc_deadband_smooth_deriv(&spec.as_deadband(), v_ac, eps)
}

#[inline]
pub(crate) fn qvac_smooth_raw(spec: &QVacSpec, v_ac: f64, eps: f64) -> f64 {
    pvdc_deadband_smooth_raw(&spec.as_deadband(), v_ac, eps)
}

#[inline]
pub(crate) fn qvac_smooth_deriv_raw(spec: &QVacSpec, v_ac: f64, eps: f64) -> f64 {
    pvdc_deadband_smooth_deriv_raw(&spec.as_deadband(), v_ac, eps)
}

// ---------------------------------------------------------------------------
// Unified curve handle and sampling
// ---------------------------------------------------------------------------

/// Any droop characteristic, as a single-input curve. The input axis is the
/// contingency perturbation for the generator response and the local voltage
/// for the converter curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DroopCurve {
    GenP(GenPResponseSpec),
    PVdcLinear(PVdcLinearSpec),
    PVdcDeadband(PVdcDeadbandSpec),
    QVac(QVacSpec),
}

impl DroopCurve {
    pub fn validate(&self) -> Result<(), CurveError> {
        match self {
            DroopCurve::GenP(s) => s.validate(),
            DroopCurve::PVdcLinear(s) => s.validate(),
            DroopCurve::PVdcDeadband(s) => s.validate(),
            DroopCurve::QVac(s) => s.validate(),
        }
    }

    pub fn exact(&self, x: f64) -> f64 {
        match self {
            DroopCurve::GenP(s) => gen_p_exact(s, x),
            DroopCurve::PVdcLinear(s) => pvdc_linear_exact(s, x),
            DroopCurve::PVdcDeadband(s) => pvdc_deadband_exact(s, x),
            DroopCurve::QVac(s) => qvac_exact(s, x),
        }
    }

    pub fn smooth(&self, x: f64, eps: f64) -> Result<f64, CurveError> {
        match self {
            DroopCurve::GenP(s) => gen_p_smooth(s, x, eps),
            DroopCurve::PVdcLinear(s) => pvdc_linear_smooth(s, x, eps),
            DroopCurve::PVdcDeadband(s) => pvdc_deadband_smooth(s, x, eps),
            DroopCurve::QVac(s) => qvac_smooth(s, x, eps),
        }
    }

    pub fn smooth_deriv(&self, x: f64, eps: f64) -> Result<f64, CurveError> {
        match self {
            DroopCurve::GenP(s) => gen_p_smooth_deriv(s, x, eps),
            DroopCurve::PVdcLinear(s) => pvdc_linear_smooth_deriv(s, x, eps),
            DroopCurve::PVdcDeadband(s) => pvdc_deadband_smooth_deriv(s, x, eps),
            DroopCurve::QVac(s) => qvac_smooth_deriv(s, x, eps),
        }
    }

    /// Softplus term count `N` in the uniform error bound `N * eps * ln 2`.
    pub fn softplus_terms(&self) -> usize {
        match self {
            DroopCurve::GenP(_) | DroopCurve::PVdcLinear(_) => 2,
            DroopCurve::PVdcDeadband(s) => s.shape().softplus_terms().max(4),
            DroopCurve::QVac(s) => s.as_deadband().shape().softplus_terms().max(4),
        }
    }
}

/// Sampled curve family: exact values plus smooth values and derivatives at
/// each sharpness in `eps_list`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub grid: Vec<f64>,
    pub eps_list: Vec<f64>,
    pub exact: Vec<f64>,
    /// `smooth[j][i]` = smooth value at `grid[i]` for `eps_list[j]`.
    pub smooth: Vec<Vec<f64>>,
    /// `deriv[j][i]` = analytic derivative at `grid[i]` for `eps_list[j]`.
    pub deriv: Vec<Vec<f64>>,
}

pub fn curve_table(
    curve: &DroopCurve,
    grid: &[f64],
    eps_list: &[f64],
) -> Result<CurveTable, CurveError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(CurveError::BadGrid);
    }
    if eps_list.is_empty() {
        return Err(CurveError::EmptyEpsList);
    }
    curve.validate()?;
    for &eps in eps_list {
        check_eps(eps)?;
    }
    let exact = grid.iter().map(|&x| curve.exact(x)).collect();
    let mut smooth = Vec::with_capacity(eps_list.len());
    let mut deriv = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        smooth.push(
            grid.iter()
                .map(|&x| curve.smooth(x, eps))
                .collect::<Result<Vec<_>, _>>()?,
        );
        deriv.push(
            grid.iter()
                .map(|&x| curve.smooth_deriv(x, eps))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(CurveTable {
        grid: grid.to_vec(),
        eps_list: eps_list.to_vec(),
        exact,
        smooth,
        deriv,
    })
}

impl CurveTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v,exact");
        for eps in &self.eps_list {
            out.push_str(&format!(",smooth_eps{eps}"));
        }
        for eps in &self.eps_list {
            out.push_str(&format!(",d_smooth_eps{eps}"));
        }
        out.push('\n');
        for i in 0..self.grid.len() {
            out.push_str(&format!("{},{}", self.grid[i], self.exact[i]));
            for col in &self.smooth {
                out.push_str(&format!(",{}", col[i]));
            }
            for col in &self.deriv {
                out.push_str(&format!(",{}", col[i]));
            }
            out.push('\n');
        }
        out
    }
}
