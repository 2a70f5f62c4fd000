//! Optimal power flow and security-constrained OPF on the smooth droop model.
//!
//! A single [`OpfProblem`] covers both: it stacks one variable/constraint
//! block per operating state (the base case, plus one state per contingency)
//! and couples the states through the frequency-response variables `delta_k`
//! and the generator voltage-margin variables. Droop characteristics enter as
//! smooth equality rows; each row can be overridden by an exact linear
//! [`Segment`], which is how the piecewise oracle reuses the same problem.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acdc::{
    ac_injection_partials, ac_injections, branch_admittance, branch_flow, branch_flow_partials,
    build_dc_conductance, build_ybus, dc_branch_flow, dc_injection_partials, dc_injections,
    s_mag_smooth, s_mag_smooth_grad, BranchAdmittance, YBus,
};
use crate::curves::{
    pvdc_deadband_exact, pvdc_deadband_smooth_deriv_raw, pvdc_deadband_smooth_raw,
    pvdc_linear_exact, pvdc_linear_smooth_deriv_raw, pvdc_linear_smooth_raw, CurveError,
    PVdcDeadbandSpec, PVdcLinearSpec,
};
use crate::network::{ContingencySpec, Network, NetworkError};
use crate::nlp::{solve_ipm_warm, IpmOptions, IpmSolution, NlpError, NlpProblem, WarmStart};
use crate::pf::{continuation_stages, prune, DroopMode};
use crate::smooth::{
    exact_clamp, logistic_raw, smooth_clamp_deriv_raw, smooth_clamp_raw, softplus_raw,
    SmoothingConfig,
};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Solver(#[from] NlpError),
}

// ---------------------------------------------------------------------------
// Scenario toggles
// ---------------------------------------------------------------------------

/// Study scenarios: which droop families are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Generator response only; converters hold their setpoints.
    I,
    /// Adds linear P-Vdc droop.
    II,
    /// Adds deadband P-Vdc droop.
    III,
    /// Linear P-Vdc plus linear Q-Vac droop.
    IV,
    /// Deadband P-Vdc plus deadband Q-Vac droop.
    V,
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i" => Ok(Scenario::I),
            "ii" => Ok(Scenario::II),
            "iii" => Ok(Scenario::III),
            "iv" => Ok(Scenario::IV),
            "v" => Ok(Scenario::V),
            other => Err(format!("unknown scenario {other:?}, expected i..v")),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
            Scenario::V => "v",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QVacMode {
    None,
    /// Deadband-free variant of the converter Q-Vac curve.
    Linear,
    Deadband,
}

/// Which curve family each converter quantity follows, plus the smoothing
/// schedule shared by every smooth row.
#[derive(Debug, Clone)]
pub struct DroopModeConfig {
    pub pvdc: DroopMode,
    pub qvac: QVacMode,
    pub smoothing: SmoothingConfig,
}

impl DroopModeConfig {
    pub fn for_scenario(scenario: Scenario, smoothing: SmoothingConfig) -> Self {
        let (pvdc, qvac) = match scenario {
            Scenario::I => (DroopMode::None, QVacMode::None),
            Scenario::II => (DroopMode::Linear, QVacMode::None),
            Scenario::III => (DroopMode::Deadband, QVacMode::None),
            Scenario::IV => (DroopMode::Linear, QVacMode::Linear),
            Scenario::V => (DroopMode::Deadband, QVacMode::Deadband),
        };
        DroopModeConfig {
            pvdc,
            qvac,
            smoothing,
        }
    }
}

// ---------------------------------------------------------------------------
// Converter curves and exact segments
// ---------------------------------------------------------------------------

/// One droop characteristic attached to a converter quantity. `qside`
/// distinguishes Q-Vac rows (output `Q_ac`, driver `V_ac`) from P-Vdc rows
/// (output `P_dc`, driver `V_dc`).
#[derive(Debug, Clone, PartialEq)]
pub enum ConverterCurve {
    Linear { spec: PVdcLinearSpec, qside: bool },
    Deadband { spec: PVdcDeadbandSpec, qside: bool },
}

/// Voltage interval outside any realistic per-unit range, used to close the
/// outermost segments.
const V_SEG_LO: f64 = 0.0;
const V_SEG_HI: f64 = 10.0;

impl ConverterCurve {
    pub fn qside(&self) -> bool {
        match self {
            ConverterCurve::Linear { qside, .. } => *qside,
            ConverterCurve::Deadband { qside, .. } => *qside,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ConverterCurve::Linear { qside: false, .. } => "pvdc_linear",
            ConverterCurve::Deadband { qside: false, .. } => "pvdc_deadband",
            ConverterCurve::Linear { qside: true, .. } => "qvac_linear",
            ConverterCurve::Deadband { qside: true, .. } => "qvac_deadband",
        }
    }

    pub fn smooth(&self, v: f64, eps: f64) -> f64 {
        match self {
            ConverterCurve::Linear { spec, .. } => pvdc_linear_smooth_raw(spec, v, eps),
            ConverterCurve::Deadband { spec, .. } => pvdc_deadband_smooth_raw(spec, v, eps),
        }
    }

    pub fn smooth_deriv(&self, v: f64, eps: f64) -> f64 {
        match self {
            ConverterCurve::Linear { spec, .. } => pvdc_linear_smooth_deriv_raw(spec, v, eps),
            ConverterCurve::Deadband { spec, .. } => pvdc_deadband_smooth_deriv_raw(spec, v, eps),
        }
    }

    pub fn exact(&self, v: f64) -> f64 {
        match self {
            ConverterCurve::Linear { spec, .. } => pvdc_linear_exact(spec, v),
            ConverterCurve::Deadband { spec, .. } => pvdc_deadband_exact(spec, v),
        }
    }

    /// Softplus terms in the smooth form, for approximation error bounds.
    pub fn softplus_terms(&self) -> usize {
        match self {
            ConverterCurve::Linear { .. } => 2,
            ConverterCurve::Deadband { spec, .. } => spec.shape().softplus_terms().max(4),
        }
    }

    /// Linear pieces of the exact curve, in ascending driver voltage. Three
    /// for the clamped linear curve, five for the deadband curve.
    pub fn segments(&self) -> Vec<Segment> {
        match self {
            ConverterCurve::Linear { spec, .. } => linear_segments(spec),
            ConverterCurve::Deadband { spec, .. } => deadband_segments(spec),
        }
    }
}

/// One linear piece `out = a + b * v`, valid for `v` in `[v_lo, v_hi]`.
/// Indices are 1-based in ascending voltage order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub a: f64,
    pub b: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

fn linear_segments(spec: &PVdcLinearSpec) -> Vec<Segment> {
    let a = spec.line(0.0);
    let b = spec.line(1.0) - a;
    let (p_lo, p_hi) = spec.power_bounds();
    let v_at = |p: f64| (p - a) / b;
    let (first, v1, v2, last) = if b > 0.0 {
        (p_lo, v_at(p_lo), v_at(p_hi), p_hi)
    } else {
        (p_hi, v_at(p_hi), v_at(p_lo), p_lo)
    };
    vec![
        Segment {
            index: 1,
            a: first,
            b: 0.0,
            v_lo: V_SEG_LO,
            v_hi: v1,
        },
        Segment {
            index: 2,
            a,
            b,
            v_lo: v1,
            v_hi: v2,
        },
        Segment {
            index: 3,
            a: last,
            b: 0.0,
            v_lo: v2,
            v_hi: V_SEG_HI,
        },
    ]
}

fn deadband_segments(spec: &PVdcDeadbandSpec) -> Vec<Segment> {
    let s = crate::curves::zeta(spec.p_ref);
    let k = spec.k_droop;
    let ko = spec.k_outer_or_default();
    let p = spec.p_ref;
    vec![
        Segment {
            index: 1,
            a: p - s * (spec.v_min / ko + (spec.db_lo - spec.v_min) / k),
            b: s / ko,
            v_lo: V_SEG_LO,
            v_hi: spec.v_min,
        },
        Segment {
            index: 2,
            a: p - s * spec.db_lo / k,
            b: s / k,
            v_lo: spec.v_min,
            v_hi: spec.db_lo,
        },
        Segment {
            index: 3,
            a: p,
            b: 0.0,
            v_lo: spec.db_lo,
            v_hi: spec.db_hi,
        },
        Segment {
            index: 4,
            a: p - s * spec.db_hi / k,
            b: s / k,
            v_lo: spec.db_hi,
            v_hi: spec.v_max,
        },
        Segment {
            index: 5,
            a: p - s * (spec.v_max / ko + (spec.db_hi - spec.v_max) / k),
            b: s / ko,
            v_lo: spec.v_max,
            v_hi: V_SEG_HI,
        },
    ]
}

// ---------------------------------------------------------------------------
// Per-state model
// ---------------------------------------------------------------------------

/// Row governing a converter dc-side power.
#[derive(Debug, Clone)]
enum ConvPRow {
    Curve(ConverterCurve, Option<Segment>),
    /// Constant-power converter: `P_dc = setpoint`.
    Setpoint(f64),
    /// DC-slack converter on an island with no active curve: its power is
    /// free and the island voltage level is anchored instead.
    Anchor(f64),
}

/// Row governing a converter ac-side reactive power.
#[derive(Debug, Clone)]
enum ConvQRow {
    Curve(ConverterCurve, Option<Segment>),
    Setpoint(f64),
}

/// One operating state: the base case or a post-contingency snapshot.
#[derive(Clone)]
pub struct StateModel {
    pub label: String,
    pub contingency: Option<ContingencySpec>,
    pub net: Network,
    ybus: YBus,
    gdc: DMatrix<f64>,
    adm: Vec<BranchAdmittance>,
    br_f: Vec<usize>,
    br_t: Vec<usize>,
    dcbr_f: Vec<usize>,
    dcbr_t: Vec<usize>,
    gens_at: Vec<Vec<usize>>,
    convs_at: Vec<Vec<usize>>,
    convs_at_dc: Vec<Vec<usize>>,
    gen_bus: Vec<usize>,
    conv_ac: Vec<usize>,
    conv_dc: Vec<usize>,

    // variable block: offsets are relative to `base`
    base: usize,
    va_idx: Vec<Option<usize>>,
    vm_off: usize,
    vdc_off: usize,
    pg_off: usize,
    qg_off: usize,
    pac_off: usize,
    qac_off: usize,
    pdc_off: usize,
    nvar: usize,

    conv_p_rows: Vec<ConvPRow>,
    conv_q_rows: Vec<ConvQRow>,

    // contingency coupling (empty/None in the base state)
    gen_base: Vec<Option<usize>>,
    gen_base_bus: Vec<Option<usize>>,
    margin_var: Vec<Option<usize>>,
    qv_slot: Vec<Option<usize>>,
    n_qv: usize,
    delta_var: Option<usize>,

    // global row offsets
    r_p: usize,
    r_q: usize,
    r_dc: usize,
    r_cpl: usize,
    r_cp: usize,
    r_cq: usize,
    r_resp: usize,
    r_qv: usize,
    rows_end: usize,
    iq_base: usize,
    n_ineq: usize,
}

impl StateModel {
    #[inline]
    fn v_va(&self, i: usize) -> Option<usize> {
        self.va_idx[i].map(|k| self.base + k)
    }
    #[inline]
    fn v_vm(&self, i: usize) -> usize {
        self.base + self.vm_off + i
    }
    #[inline]
    fn v_vdc(&self, d: usize) -> usize {
        self.base + self.vdc_off + d
    }
    #[inline]
    fn v_pg(&self, g: usize) -> usize {
        self.base + self.pg_off + g
    }
    #[inline]
    fn v_qg(&self, g: usize) -> usize {
        self.base + self.qg_off + g
    }
    #[inline]
    fn v_pac(&self, c: usize) -> usize {
        self.base + self.pac_off + c
    }
    #[inline]
    fn v_qac(&self, c: usize) -> usize {
        self.base + self.qac_off + c
    }
    #[inline]
    fn v_pdc(&self, c: usize) -> usize {
        self.base + self.pdc_off + c
    }

    fn vm_slice(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.net.buses.len()).map(|i| x[self.v_vm(i)]).collect()
    }

    fn va_full(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.net.buses.len())
            .map(|i| self.v_va(i).map_or(0.0, |k| x[k]))
            .collect()
    }

    fn vdc_slice(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.net.dc_buses.len())
            .map(|d| x[self.v_vdc(d)])
            .collect()
    }

    fn segment_count(&self) -> usize {
        let p = self
            .conv_p_rows
            .iter()
            .filter(|r| matches!(r, ConvPRow::Curve(_, Some(_))))
            .count();
        let q = self
            .conv_q_rows
            .iter()
            .filter(|r| matches!(r, ConvQRow::Curve(_, Some(_))))
            .count();
        p + q
    }
}

// ---------------------------------------------------------------------------
// Problem assembly
// ---------------------------------------------------------------------------

/// Addresses one droop row for segment overrides and consistency reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DroopHandle {
    pub state: usize,
    pub conv: usize,
    pub qside: bool,
}

/// Multi-state OPF/SCOPF posed as a generic smooth NLP.
#[derive(Clone)]
pub struct OpfProblem {
    states: Vec<StateModel>,
    cfg: DroopModeConfig,
    eps: f64,
    nvar: usize,
    m_eq: usize,
    m_ineq: usize,
    n_delta: usize,
    n_margin_pairs: usize,
}

/// Single-state OPF over the base case.
pub fn build_opf(net: &Network, cfg: &DroopModeConfig) -> Result<OpfProblem, OpfError> {
    build_states(net, &[], cfg)
}

/// SCOPF over the base case plus every contingency listed in `net`.
pub fn build_scopf(net: &Network, cfg: &DroopModeConfig) -> Result<OpfProblem, OpfError> {
    build_states(net, &net.contingencies, cfg)
}

fn build_states(
    net: &Network,
    contingencies: &[ContingencySpec],
    cfg: &DroopModeConfig,
) -> Result<OpfProblem, OpfError> {
    cfg.smoothing
        .validate()
        .map_err(|e| OpfError::Model(e.to_string()))?;
    let report = net.validate();
    if !report.is_empty() {
        return Err(OpfError::Network(NetworkError::Validation(report)));
    }

    let mut nets = vec![("base".to_string(), None, prune(net))];
    for c in contingencies {
        let derived = net.apply_contingency(c)?;
        nets.push((c.id.clone(), Some(c.clone()), prune(&derived)));
    }

    let mut states = Vec::with_capacity(nets.len());
    let mut cursor = 0usize;
    for (label, contingency, snet) in nets {
        let state = build_state_layout(label, contingency, snet, cfg, cursor)?;
        cursor += state.nvar;
        states.push(state);
    }

    // cross-state coupling against the base state
    let base_gen_ids: Vec<String> = states[0]
        .net
        .generators
        .iter()
        .map(|g| g.id.clone())
        .collect();
    let base_bus_index: std::collections::HashMap<String, usize> = states[0]
        .net
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id.clone(), i))
        .collect();
    for s in states.iter_mut().skip(1) {
        for (j, g) in s.net.generators.iter().enumerate() {
            let b = base_gen_ids.iter().position(|id| id == &g.id);
            if b.is_none() {
                return Err(OpfError::Model(format!(
                    "generator {} in state {} missing from the base case",
                    g.id, s.label
                )));
            }
            s.gen_base[j] = b;
            s.gen_base_bus[j] = base_bus_index.get(g.bus_id.as_str()).copied();
        }
    }

    // global coupling variables: delta_k, then voltage margin pairs
    let mut n_delta = 0;
    for s in states.iter_mut().skip(1) {
        s.delta_var = Some(cursor);
        cursor += 1;
        n_delta += 1;
    }
    let mut n_margin_pairs = 0;
    for s in states.iter_mut().skip(1) {
        let mut slot = 0;
        for j in 0..s.net.generators.len() {
            if s.net.generators[j].responding {
                s.margin_var[j] = Some(cursor);
                s.qv_slot[j] = Some(slot);
                cursor += 2;
                slot += 1;
                n_margin_pairs += 1;
            }
        }
        s.n_qv = slot;
    }
    let nvar = cursor;

    // equality row layout
    let mut row = 0usize;
    for s in states.iter_mut() {
        let (n_bus, n_dc, n_conv, n_gen) = (
            s.net.buses.len(),
            s.net.dc_buses.len(),
            s.net.converters.len(),
            s.net.generators.len(),
        );
        s.r_p = row;
        s.r_q = row + n_bus;
        s.r_dc = s.r_q + n_bus;
        s.r_cpl = s.r_dc + n_dc;
        s.r_cp = s.r_cpl + n_conv;
        s.r_cq = s.r_cp + n_conv;
        row = s.r_cq + n_conv;
        if s.contingency.is_some() {
            s.r_resp = row;
            s.r_qv = row + n_gen;
            row = s.r_qv + s.n_qv;
        } else {
            s.r_resp = row;
            s.r_qv = row;
        }
        s.rows_end = row;
    }
    let m_eq = row;

    let mut problem = OpfProblem {
        states,
        eps: cfg.smoothing.epsilon,
        cfg: cfg.clone(),
        nvar,
        m_eq,
        m_ineq: 0,
        n_delta,
        n_margin_pairs,
    };
    problem.relayout_ineq();
    Ok(problem)
}

fn build_state_layout(
    label: String,
    contingency: Option<ContingencySpec>,
    net: Network,
    cfg: &DroopModeConfig,
    base: usize,
) -> Result<StateModel, OpfError> {
    let n_bus = net.buses.len();
    let n_dc = net.dc_buses.len();
    let n_gen = net.generators.len();
    let n_conv = net.converters.len();

    let bus_index = net.bus_index();
    let dc_index = net.dc_bus_index();

    let mut va_idx = vec![None; n_bus];
    let mut n_va = 0;
    for (i, b) in net.buses.iter().enumerate() {
        if b.kind != crate::network::BusKind::Slack {
            va_idx[i] = Some(n_va);
            n_va += 1;
        }
    }
    let vm_off = n_va;
    let vdc_off = vm_off + n_bus;
    let pg_off = vdc_off + n_dc;
    let qg_off = pg_off + n_gen;
    let pac_off = qg_off + n_gen;
    let qac_off = pac_off + n_conv;
    let pdc_off = qac_off + n_conv;
    let nvar = pdc_off + n_conv;

    let mut gens_at = vec![Vec::new(); n_bus];
    let mut gen_bus = Vec::with_capacity(n_gen);
    for (j, g) in net.generators.iter().enumerate() {
        let b = bus_index[g.bus_id.as_str()];
        gens_at[b].push(j);
        gen_bus.push(b);
    }
    let mut convs_at = vec![Vec::new(); n_bus];
    let mut convs_at_dc = vec![Vec::new(); n_dc];
    let mut conv_ac = Vec::with_capacity(n_conv);
    let mut conv_dc = Vec::with_capacity(n_conv);
    for (c, conv) in net.converters.iter().enumerate() {
        let a = bus_index[conv.ac_bus_id.as_str()];
        let d = dc_index[conv.dc_bus_id.as_str()];
        convs_at[a].push(c);
        convs_at_dc[d].push(c);
        conv_ac.push(a);
        conv_dc.push(d);
    }

    let mut adm = Vec::with_capacity(net.ac_branches.len());
    let mut br_f = Vec::with_capacity(net.ac_branches.len());
    let mut br_t = Vec::with_capacity(net.ac_branches.len());
    for br in &net.ac_branches {
        adm.push(branch_admittance(br.resistance, br.reactance, br.tap));
        br_f.push(bus_index[br.from_id.as_str()]);
        br_t.push(bus_index[br.to_id.as_str()]);
    }
    let mut dcbr_f = Vec::with_capacity(net.dc_branches.len());
    let mut dcbr_t = Vec::with_capacity(net.dc_branches.len());
    for br in &net.dc_branches {
        dcbr_f.push(dc_index[br.from_id.as_str()]);
        dcbr_t.push(dc_index[br.to_id.as_str()]);
    }

    // converter rows under the scenario toggles
    let mut conv_p_rows: Vec<ConvPRow> = net
        .converters
        .iter()
        .map(|conv| {
            let curve = match cfg.pvdc {
                DroopMode::None => None,
                DroopMode::Linear => conv.pvdc_linear.clone().map(|spec| ConverterCurve::Linear {
                    spec,
                    qside: false,
                }),
                DroopMode::Deadband => {
                    conv.pvdc_deadband
                        .clone()
                        .map(|spec| ConverterCurve::Deadband { spec, qside: false })
                }
            };
            match curve {
                Some(c) => ConvPRow::Curve(c, None),
                None => ConvPRow::Setpoint(conv.p_dc_set),
            }
        })
        .collect();
    let conv_q_rows: Vec<ConvQRow> = net
        .converters
        .iter()
        .map(|conv| {
            let curve = match cfg.qvac {
                QVacMode::None => None,
                QVacMode::Linear => conv.qvac.as_ref().map(|q| ConverterCurve::Linear {
                    spec: q.as_linear(),
                    qside: true,
                }),
                QVacMode::Deadband => conv.qvac.as_ref().map(|q| ConverterCurve::Deadband {
                    spec: q.as_deadband(),
                    qside: true,
                }),
            };
            match curve {
                Some(c) => ConvQRow::Curve(c, None),
                None => ConvQRow::Setpoint(conv.q_ac_set),
            }
        })
        .collect();

    // dc islands where every converter holds constant power have no row
    // pinning the voltage level: anchor one converter there instead
    for island in net.dc_islands() {
        let members: Vec<usize> = (0..n_conv)
            .filter(|&c| island.contains(&conv_dc[c]))
            .collect();
        if members.is_empty() {
            if island
                .iter()
                .any(|&d| net.dc_buses[d].load_p.abs() > 0.0)
            {
                return Err(OpfError::Model(format!(
                    "dc island containing {} has load but no converter",
                    net.dc_buses[island[0]].id
                )));
            }
            continue;
        }
        let has_curve = members
            .iter()
            .any(|&c| matches!(conv_p_rows[c], ConvPRow::Curve(..)));
        if !has_curve {
            let c0 = members[0];
            let v = net.converters[c0]
                .pvdc_linear
                .as_ref()
                .map(|s| s.v_ref)
                .unwrap_or(1.0);
            conv_p_rows[c0] = ConvPRow::Anchor(v);
        }
    }

    Ok(StateModel {
        label,
        contingency,
        ybus: build_ybus(&net),
        gdc: build_dc_conductance(&net),
        adm,
        br_f,
        br_t,
        dcbr_f,
        dcbr_t,
        gens_at,
        convs_at,
        convs_at_dc,
        gen_bus,
        conv_ac,
        conv_dc,
        base,
        va_idx,
        vm_off,
        vdc_off,
        pg_off,
        qg_off,
        pac_off,
        qac_off,
        pdc_off,
        nvar,
        conv_p_rows,
        conv_q_rows,
        gen_base: vec![None; n_gen],
        gen_base_bus: vec![None; n_gen],
        margin_var: vec![None; n_gen],
        qv_slot: vec![None; n_gen],
        n_qv: 0,
        delta_var: None,
        r_p: 0,
        r_q: 0,
        r_dc: 0,
        r_cpl: 0,
        r_cp: 0,
        r_cq: 0,
        r_resp: 0,
        r_qv: 0,
        rows_end: 0,
        iq_base: 0,
        n_ineq: 0,
        net,
    })
}

/// Audit of problem sizes, one row per state plus the coupling block.
#[derive(Debug, Clone, Serialize)]
pub struct StateDims {
    pub label: String,
    pub vars: usize,
    pub eqs: usize,
    pub ineqs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DimensionAudit {
    pub num_vars: usize,
    pub num_eq: usize,
    pub num_ineq: usize,
    /// delta_k and voltage-margin variables shared across states.
    pub coupling_vars: usize,
    pub states: Vec<StateDims>,
}

impl OpfProblem {
    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    pub fn set_epsilon(&mut self, eps: f64) {
        self.eps = eps;
    }

    pub fn config(&self) -> &DroopModeConfig {
        &self.cfg
    }

    pub fn states(&self) -> &[StateModel] {
        &self.states
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.states.iter().position(|s| s.label == label)
    }

    fn relayout_ineq(&mut self) {
        let mut row = 0;
        for s in self.states.iter_mut() {
            s.iq_base = row;
            s.n_ineq = 2 * s.net.ac_branches.len()
                + s.net.converters.len()
                + 2 * s.net.dc_branches.len()
                + 2 * s.segment_count();
            row += s.n_ineq;
        }
        self.m_ineq = row;
    }

    /// Every droop curve row, in deterministic (state, converter, P-then-Q)
    /// order.
    pub fn droop_handles(&self) -> Vec<(DroopHandle, ConverterCurve)> {
        let mut out = Vec::new();
        for (si, s) in self.states.iter().enumerate() {
            for (c, row) in s.conv_p_rows.iter().enumerate() {
                if let ConvPRow::Curve(curve, _) = row {
                    out.push((
                        DroopHandle {
                            state: si,
                            conv: c,
                            qside: false,
                        },
                        curve.clone(),
                    ));
                }
            }
            for (c, row) in s.conv_q_rows.iter().enumerate() {
                if let ConvQRow::Curve(curve, _) = row {
                    out.push((
                        DroopHandle {
                            state: si,
                            conv: c,
                            qside: true,
                        },
                        curve.clone(),
                    ));
                }
            }
        }
        out
    }

    /// Replace (or restore) one droop row by an exact linear segment.
    pub fn set_segment(&mut self, h: DroopHandle, seg: Option<Segment>) {
        let s = &mut self.states[h.state];
        if h.qside {
            if let ConvQRow::Curve(_, slot) = &mut s.conv_q_rows[h.conv] {
                *slot = seg;
            }
        } else if let ConvPRow::Curve(_, slot) = &mut s.conv_p_rows[h.conv] {
            *slot = seg;
        }
        self.relayout_ineq();
    }

    pub fn audit(&self) -> DimensionAudit {
        DimensionAudit {
            num_vars: self.nvar,
            num_eq: self.m_eq,
            num_ineq: self.m_ineq,
            coupling_vars: self.n_delta + 2 * self.n_margin_pairs,
            states: self
                .states
                .iter()
                .map(|s| StateDims {
                    label: s.label.clone(),
                    vars: s.nvar,
                    eqs: s.rows_end - s.r_p,
                    ineqs: s.n_ineq,
                })
                .collect(),
        }
    }

    // ---- solution accessors -------------------------------------------------

    pub fn bus_vm(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let i = s.net.buses.iter().position(|b| b.id == id)?;
        Some(x[s.v_vm(i)])
    }

    pub fn dc_voltage(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let d = s.net.dc_buses.iter().position(|b| b.id == id)?;
        Some(x[s.v_vdc(d)])
    }

    pub fn gen_p(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let g = s.net.generators.iter().position(|g| g.id == id)?;
        Some(x[s.v_pg(g)])
    }

    pub fn gen_q(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let g = s.net.generators.iter().position(|g| g.id == id)?;
        Some(x[s.v_qg(g)])
    }

    pub fn conv_p_dc(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let c = s.net.converters.iter().position(|c| c.id == id)?;
        Some(x[s.v_pdc(c)])
    }

    pub fn conv_p_ac(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let c = s.net.converters.iter().position(|c| c.id == id)?;
        Some(x[s.v_pac(c)])
    }

    pub fn conv_q_ac(&self, x: &[f64], state: usize, id: &str) -> Option<f64> {
        let s = self.states.get(state)?;
        let c = s.net.converters.iter().position(|c| c.id == id)?;
        Some(x[s.v_qac(c)])
    }

    pub fn delta(&self, x: &[f64], state: usize) -> Option<f64> {
        self.states.get(state)?.delta_var.map(|k| x[k])
    }

    /// Driver voltage of a droop row: dc voltage for P-Vdc rows, ac voltage
    /// magnitude for Q-Vac rows.
    pub fn driver_value(&self, x: &[f64], h: DroopHandle) -> f64 {
        let s = &self.states[h.state];
        if h.qside {
            x[s.v_vm(s.conv_ac[h.conv])]
        } else {
            x[s.v_vdc(s.conv_dc[h.conv])]
        }
    }

    /// Output variable of a droop row: `P_dc` or `Q_ac` of its converter.
    pub fn output_value(&self, x: &[f64], h: DroopHandle) -> f64 {
        let s = &self.states[h.state];
        if h.qside {
            x[s.v_qac(h.conv)]
        } else {
            x[s.v_pdc(h.conv)]
        }
    }

    /// `(v_plus, v_minus)` voltage margins of a responding generator.
    pub fn margins(&self, x: &[f64], state: usize, id: &str) -> Option<(f64, f64)> {
        let s = self.states.get(state)?;
        let g = s.net.generators.iter().position(|g| g.id == id)?;
        s.margin_var[g].map(|k| (x[k], x[k + 1]))
    }
}

// ---------------------------------------------------------------------------
// NlpProblem implementation
// ---------------------------------------------------------------------------

impl NlpProblem for OpfProblem {
    fn num_vars(&self) -> usize {
        self.nvar
    }

    fn num_eq(&self) -> usize {
        self.m_eq
    }

    fn num_ineq(&self) -> usize {
        self.m_ineq
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let base = &self.states[0];
        base.net
            .generators
            .iter()
            .enumerate()
            .map(|(g, gen)| gen.cost.value(x[base.v_pg(g)]))
            .sum()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.nvar);
        let base = &self.states[0];
        for (g, gen) in base.net.generators.iter().enumerate() {
            grad[base.v_pg(g)] = gen.cost.deriv(x[base.v_pg(g)]);
        }
        grad
    }

    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.m_eq);
        let base = &self.states[0];
        for s in &self.states {
            let vm = s.vm_slice(x);
            let va = s.va_full(x);
            let vdc = s.vdc_slice(x);
            let (p_inj, q_inj) = ac_injections(&s.ybus, &vm, &va);
            for (i, bus) in s.net.buses.iter().enumerate() {
                let mut pv = p_inj[i] + bus.load_p;
                let mut qv = q_inj[i] + bus.load_q;
                for &g in &s.gens_at[i] {
                    pv -= x[s.v_pg(g)];
                    qv -= x[s.v_qg(g)];
                }
                for &c in &s.convs_at[i] {
                    pv -= x[s.v_pac(c)];
                    qv -= x[s.v_qac(c)];
                }
                r[s.r_p + i] = pv;
                r[s.r_q + i] = qv;
            }
            let dci = dc_injections(&s.gdc, &vdc);
            for (d, dbus) in s.net.dc_buses.iter().enumerate() {
                let mut v = dci[d] + dbus.load_p;
                for &c in &s.convs_at_dc[d] {
                    v -= x[s.v_pdc(c)];
                }
                r[s.r_dc + d] = v;
            }
            for (c, conv) in s.net.converters.iter().enumerate() {
                let pac = x[s.v_pac(c)];
                let qac = x[s.v_qac(c)];
                let pdc = x[s.v_pdc(c)];
                r[s.r_cpl + c] =
                    pac + pdc + conv.loss_a + conv.loss_b * s_mag_smooth(pac, qac) / conv.s_max;
                r[s.r_cp + c] = match &s.conv_p_rows[c] {
                    ConvPRow::Curve(curve, None) => pdc - curve.smooth(vdc[s.conv_dc[c]], self.eps),
                    ConvPRow::Curve(_, Some(seg)) => pdc - (seg.a + seg.b * vdc[s.conv_dc[c]]),
                    ConvPRow::Setpoint(p0) => pdc - p0,
                    ConvPRow::Anchor(v0) => vdc[s.conv_dc[c]] - v0,
                };
                r[s.r_cq + c] = match &s.conv_q_rows[c] {
                    ConvQRow::Curve(curve, None) => qac - curve.smooth(vm[s.conv_ac[c]], self.eps),
                    ConvQRow::Curve(_, Some(seg)) => qac - (seg.a + seg.b * vm[s.conv_ac[c]]),
                    ConvQRow::Setpoint(q0) => qac - q0,
                };
            }
            if let Some(dv) = s.delta_var {
                let delta = x[dv];
                for (j, g) in s.net.generators.iter().enumerate() {
                    let b = s.gen_base[j].expect("coupled state checked at build");
                    let pg0 = x[base.v_pg(b)];
                    let pr = &g.p_response;
                    r[s.r_resp + j] = if g.responding {
                        x[s.v_pg(j)]
                            - smooth_clamp_raw(
                                pg0 + pr.alpha * delta,
                                pr.p_min,
                                pr.p_max,
                                self.eps,
                            )
                    } else {
                        x[s.v_pg(j)] - pg0
                    };
                    if let Some(mv) = s.margin_var[j] {
                        let q = x[s.v_qg(j)];
                        let a1 = x[mv] - q + g.qv.q_min;
                        let a2 = x[mv + 1] + q - g.qv.q_max;
                        let vm0 = x[base.v_vm(s.gen_base_bus[j].expect("bus in base"))];
                        r[s.r_qv + s.qv_slot[j].unwrap()] = vm[s.gen_bus[j]] - vm0
                            - softplus_raw(a1, self.eps)
                            + softplus_raw(a2, self.eps);
                    }
                }
            }
        }
        r
    }

    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.m_eq, self.nvar);
        let base = &self.states[0];
        for s in &self.states {
            let vm = s.vm_slice(x);
            let va = s.va_full(x);
            let vdc = s.vdc_slice(x);
            let n_bus = s.net.buses.len();
            let parts = ac_injection_partials(&s.ybus, &vm, &va);
            for i in 0..n_bus {
                for j in 0..n_bus {
                    if let Some(col) = s.v_va(j) {
                        jac[(s.r_p + i, col)] = parts.dp_dva[(i, j)];
                        jac[(s.r_q + i, col)] = parts.dq_dva[(i, j)];
                    }
                    jac[(s.r_p + i, s.v_vm(j))] = parts.dp_dvm[(i, j)];
                    jac[(s.r_q + i, s.v_vm(j))] = parts.dq_dvm[(i, j)];
                }
                for &g in &s.gens_at[i] {
                    jac[(s.r_p + i, s.v_pg(g))] = -1.0;
                    jac[(s.r_q + i, s.v_qg(g))] = -1.0;
                }
                for &c in &s.convs_at[i] {
                    jac[(s.r_p + i, s.v_pac(c))] = -1.0;
                    jac[(s.r_q + i, s.v_qac(c))] = -1.0;
                }
            }
            let dcp = dc_injection_partials(&s.gdc, &vdc);
            for d in 0..s.net.dc_buses.len() {
                for e in 0..s.net.dc_buses.len() {
                    jac[(s.r_dc + d, s.v_vdc(e))] = dcp[(d, e)];
                }
                for &c in &s.convs_at_dc[d] {
                    jac[(s.r_dc + d, s.v_pdc(c))] = -1.0;
                }
            }
            for (c, conv) in s.net.converters.iter().enumerate() {
                let pac = x[s.v_pac(c)];
                let qac = x[s.v_qac(c)];
                let (ds_dp, ds_dq) = s_mag_smooth_grad(pac, qac);
                let w = conv.loss_b / conv.s_max;
                jac[(s.r_cpl + c, s.v_pac(c))] = 1.0 + w * ds_dp;
                jac[(s.r_cpl + c, s.v_qac(c))] = w * ds_dq;
                jac[(s.r_cpl + c, s.v_pdc(c))] = 1.0;
                match &s.conv_p_rows[c] {
                    ConvPRow::Curve(curve, None) => {
                        jac[(s.r_cp + c, s.v_pdc(c))] = 1.0;
                        jac[(s.r_cp + c, s.v_vdc(s.conv_dc[c]))] =
                            -curve.smooth_deriv(vdc[s.conv_dc[c]], self.eps);
                    }
                    ConvPRow::Curve(_, Some(seg)) => {
                        jac[(s.r_cp + c, s.v_pdc(c))] = 1.0;
                        jac[(s.r_cp + c, s.v_vdc(s.conv_dc[c]))] = -seg.b;
                    }
                    ConvPRow::Setpoint(_) => {
                        jac[(s.r_cp + c, s.v_pdc(c))] = 1.0;
                    }
                    ConvPRow::Anchor(_) => {
                        jac[(s.r_cp + c, s.v_vdc(s.conv_dc[c]))] = 1.0;
                    }
                }
                match &s.conv_q_rows[c] {
                    ConvQRow::Curve(curve, None) => {
                        jac[(s.r_cq + c, s.v_qac(c))] = 1.0;
                        jac[(s.r_cq + c, s.v_vm(s.conv_ac[c]))] =
                            -curve.smooth_deriv(vm[s.conv_ac[c]], self.eps);
                    }
                    ConvQRow::Curve(_, Some(seg)) => {
                        jac[(s.r_cq + c, s.v_qac(c))] = 1.0;
                        jac[(s.r_cq + c, s.v_vm(s.conv_ac[c]))] = -seg.b;
                    }
                    ConvQRow::Setpoint(_) => {
                        jac[(s.r_cq + c, s.v_qac(c))] = 1.0;
                    }
                }
            }
            if let Some(dv) = s.delta_var {
                let delta = x[dv];
                for (j, g) in s.net.generators.iter().enumerate() {
                    let b = s.gen_base[j].unwrap();
                    jac[(s.r_resp + j, s.v_pg(j))] = 1.0;
                    if g.responding {
                        let pr = &g.p_response;
                        let d = smooth_clamp_deriv_raw(
                            x[base.v_pg(b)] + pr.alpha * delta,
                            pr.p_min,
                            pr.p_max,
                            self.eps,
                        );
                        jac[(s.r_resp + j, base.v_pg(b))] = -d;
                        jac[(s.r_resp + j, dv)] = -d * pr.alpha;
                    } else {
                        jac[(s.r_resp + j, base.v_pg(b))] = -1.0;
                    }
                    if let Some(mv) = s.margin_var[j] {
                        let row = s.r_qv + s.qv_slot[j].unwrap();
                        let q = x[s.v_qg(j)];
                        let a1 = x[mv] - q + g.qv.q_min;
                        let a2 = x[mv + 1] + q - g.qv.q_max;
                        let s1 = logistic_raw(a1, self.eps);
                        let s2 = logistic_raw(a2, self.eps);
                        jac[(row, s.v_vm(s.gen_bus[j]))] = 1.0;
                        jac[(row, base.v_vm(s.gen_base_bus[j].unwrap()))] = -1.0;
                        jac[(row, mv)] = -s1;
                        jac[(row, mv + 1)] = s2;
                        jac[(row, s.v_qg(j))] = s1 + s2;
                    }
                }
            }
        }
        jac
    }

    fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.m_ineq);
        for s in &self.states {
            let vm = s.vm_slice(x);
            let va = s.va_full(x);
            let vdc = s.vdc_slice(x);
            let mut row = s.iq_base;
            for (bi, br) in s.net.ac_branches.iter().enumerate() {
                let (f, t) = (s.br_f[bi], s.br_t[bi]);
                let fl = branch_flow(&s.adm[bi], vm[f], va[f], vm[t], va[t]);
                let cap = br.s_max * br.s_max;
                r[row] = fl.p_from * fl.p_from + fl.q_from * fl.q_from - cap;
                r[row + 1] = fl.p_to * fl.p_to + fl.q_to * fl.q_to - cap;
                row += 2;
            }
            for (c, conv) in s.net.converters.iter().enumerate() {
                let pac = x[s.v_pac(c)];
                let qac = x[s.v_qac(c)];
                r[row] = pac * pac + qac * qac - conv.s_max * conv.s_max;
                row += 1;
            }
            for (bi, br) in s.net.dc_branches.iter().enumerate() {
                let (f, t) = (s.dcbr_f[bi], s.dcbr_t[bi]);
                r[row] = dc_branch_flow(br.resistance, vdc[f], vdc[t]) - br.p_max;
                r[row + 1] = dc_branch_flow(br.resistance, vdc[t], vdc[f]) - br.p_max;
                row += 2;
            }
            for (c, prow) in s.conv_p_rows.iter().enumerate() {
                if let ConvPRow::Curve(_, Some(seg)) = prow {
                    let v = vdc[s.conv_dc[c]];
                    r[row] = seg.v_lo - v;
                    r[row + 1] = v - seg.v_hi;
                    row += 2;
                }
            }
            for (c, qrow) in s.conv_q_rows.iter().enumerate() {
                if let ConvQRow::Curve(_, Some(seg)) = qrow {
                    let v = vm[s.conv_ac[c]];
                    r[row] = seg.v_lo - v;
                    r[row + 1] = v - seg.v_hi;
                    row += 2;
                }
            }
        }
        r
    }

    fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.m_ineq, self.nvar);
        for s in &self.states {
            let vm = s.vm_slice(x);
            let va = s.va_full(x);
            let vdc = s.vdc_slice(x);
            let mut row = s.iq_base;
            for (bi, _) in s.net.ac_branches.iter().enumerate() {
                let (f, t) = (s.br_f[bi], s.br_t[bi]);
                let fl = branch_flow(&s.adm[bi], vm[f], va[f], vm[t], va[t]);
                let pp = branch_flow_partials(&s.adm[bi], vm[f], va[f], vm[t], va[t]);
                // partials are ordered (va_f, va_t, vm_f, vm_t)
                let cols = [s.v_va(f), s.v_va(t), Some(s.v_vm(f)), Some(s.v_vm(t))];
                for (k, col) in cols.iter().enumerate() {
                    if let Some(col) = col {
                        jac[(row, *col)] = 2.0 * fl.p_from * pp.p_from[k] + 2.0 * fl.q_from * pp.q_from[k];
                        jac[(row + 1, *col)] = 2.0 * fl.p_to * pp.p_to[k] + 2.0 * fl.q_to * pp.q_to[k];
                    }
                }
                row += 2;
            }
            for c in 0..s.net.converters.len() {
                jac[(row, s.v_pac(c))] = 2.0 * x[s.v_pac(c)];
                jac[(row, s.v_qac(c))] = 2.0 * x[s.v_qac(c)];
                row += 1;
            }
            for (bi, br) in s.net.dc_branches.iter().enumerate() {
                let (f, t) = (s.dcbr_f[bi], s.dcbr_t[bi]);
                jac[(row, s.v_vdc(f))] = (2.0 * vdc[f] - vdc[t]) / br.resistance;
                jac[(row, s.v_vdc(t))] = -vdc[f] / br.resistance;
                jac[(row + 1, s.v_vdc(t))] = (2.0 * vdc[t] - vdc[f]) / br.resistance;
                jac[(row + 1, s.v_vdc(f))] = -vdc[t] / br.resistance;
                row += 2;
            }
            for (c, prow) in s.conv_p_rows.iter().enumerate() {
                if let ConvPRow::Curve(_, Some(_)) = prow {
                    let col = s.v_vdc(s.conv_dc[c]);
                    jac[(row, col)] = -1.0;
                    jac[(row + 1, col)] = 1.0;
                    row += 2;
                }
            }
            for (c, qrow) in s.conv_q_rows.iter().enumerate() {
                if let ConvQRow::Curve(_, Some(_)) = qrow {
                    let col = s.v_vm(s.conv_ac[c]);
                    jac[(row, col)] = -1.0;
                    jac[(row + 1, col)] = 1.0;
                    row += 2;
                }
            }
        }
        jac
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let mut lo = DVector::from_element(self.nvar, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(self.nvar, f64::INFINITY);
        for s in &self.states {
            for (i, bus) in s.net.buses.iter().enumerate() {
                lo[s.v_vm(i)] = bus.v_min;
                hi[s.v_vm(i)] = bus.v_max;
            }
            for (d, dbus) in s.net.dc_buses.iter().enumerate() {
                lo[s.v_vdc(d)] = dbus.v_min;
                hi[s.v_vdc(d)] = dbus.v_max;
            }
            for (g, gen) in s.net.generators.iter().enumerate() {
                lo[s.v_pg(g)] = gen.p_response.p_min;
                hi[s.v_pg(g)] = gen.p_response.p_max;
                lo[s.v_qg(g)] = gen.q_min;
                hi[s.v_qg(g)] = gen.q_max;
            }
            for (c, conv) in s.net.converters.iter().enumerate() {
                for col in [s.v_pac(c), s.v_qac(c), s.v_pdc(c)] {
                    lo[col] = -2.0 * conv.s_max;
                    hi[col] = 2.0 * conv.s_max;
                }
            }
            for (j, g) in s.net.generators.iter().enumerate() {
                if let Some(mv) = s.margin_var[j] {
                    lo[mv] = 0.0;
                    hi[mv] = g.qv.v_max - g.qv.v_base;
                    lo[mv + 1] = 0.0;
                    hi[mv + 1] = g.qv.v_base - g.qv.v_min;
                }
            }
        }
        // widen degenerate boxes slightly so the log barrier stays finite
        for j in 0..self.nvar {
            if hi[j] - lo[j] < 1e-9 && hi[j].is_finite() {
                lo[j] -= 5e-7;
                hi[j] += 5e-7;
            }
        }
        (lo, hi)
    }

    fn initial_point(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.nvar);
        for s in &self.states {
            for i in 0..s.net.buses.len() {
                x[s.v_vm(i)] = 1.0;
            }
            for d in 0..s.net.dc_buses.len() {
                x[s.v_vdc(d)] = 1.0;
            }
            for (g, gen) in s.net.generators.iter().enumerate() {
                x[s.v_pg(g)] = gen.p_response.p_base;
                x[s.v_qg(g)] = 0.0;
            }
            for (c, conv) in s.net.converters.iter().enumerate() {
                x[s.v_pdc(c)] = conv.p_dc_set;
                x[s.v_pac(c)] = -(conv.p_dc_set + conv.loss_a);
                x[s.v_qac(c)] = conv.q_ac_set;
            }
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Epsilon continuation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SolveStatus {
    Converged,
    /// A later stage failed; the result is the last stage that converged.
    Downgraded { reached_eps: f64, message: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub eps: f64,
    pub objective: f64,
    pub kkt: f64,
    pub iterations: usize,
}

#[derive(Debug)]
pub struct ContinuationResult {
    pub solution: IpmSolution,
    /// Sharpness the returned solution was solved at.
    pub eps: f64,
    pub status: SolveStatus,
    pub stages: Vec<StageRecord>,
}

/// Solve with a decreasing-epsilon homotopy, warm-starting primal and dual
/// values between stages. A failed intermediate stage downgrades the result
/// to the last epsilon that converged instead of erroring out.
pub fn epsilon_continuation(
    problem: &mut OpfProblem,
    opts: &IpmOptions,
) -> Result<ContinuationResult, OpfError> {
    let schedule = continuation_stages(&problem.cfg.smoothing);
    let mut stages = Vec::with_capacity(schedule.len());
    let mut best: Option<(IpmSolution, f64)> = None;
    for (k, &eps) in schedule.iter().enumerate() {
        problem.set_epsilon(eps);
        let mut stage_opts = opts.clone();
        if k + 1 < schedule.len() {
            stage_opts.tol = opts.tol.max(1e-6);
        }
        if k > 0 {
            stage_opts.mu_init = 1e-3;
        }
        let warm = best.as_ref().map(|(sol, _)| WarmStart::from(sol));
        match solve_ipm_warm(problem, &stage_opts, warm.as_ref()) {
            Ok(sol) => {
                stages.push(StageRecord {
                    eps,
                    objective: sol.objective,
                    kkt: sol.kkt,
                    iterations: sol.iterations,
                });
                best = Some((sol, eps));
            }
            Err(err) => {
                return match best {
                    // nothing converged at all: a real failure
                    None => Err(OpfError::Solver(err)),
                    Some((sol, reached)) => {
                        problem.set_epsilon(reached);
                        Ok(ContinuationResult {
                            solution: sol,
                            eps: reached,
                            status: SolveStatus::Downgraded {
                                reached_eps: reached,
                                message: format!("stage eps {eps:.3e}: {err}"),
                            },
                            stages,
                        })
                    }
                };
            }
        }
    }
    let (solution, eps) = best.expect("schedule is never empty");
    Ok(ContinuationResult {
        solution,
        eps,
        status: SolveStatus::Converged,
        stages,
    })
}

// ---------------------------------------------------------------------------
// Serializable solution summary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BusSummary {
    pub id: String,
    pub vm: f64,
    pub va: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DcBusSummary {
    pub id: String,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub id: String,
    pub p: f64,
    pub q: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvSummary {
    pub id: String,
    pub p_ac: f64,
    pub q_ac: f64,
    pub p_dc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginSummary {
    pub generator: String,
    pub v_plus: f64,
    pub v_minus: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StateSummary {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub buses: Vec<BusSummary>,
    pub dc_buses: Vec<DcBusSummary>,
    pub generators: Vec<GenSummary>,
    pub converters: Vec<ConvSummary>,
    pub margins: Vec<MarginSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpfSummary {
    pub objective: f64,
    pub eps: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub stages: Vec<StageRecord>,
    pub states: Vec<StateSummary>,
}

impl OpfProblem {
    pub fn summarize(&self, res: &ContinuationResult) -> OpfSummary {
        let x = &res.solution.x;
        let states = self
            .states
            .iter()
            .enumerate()
            .map(|(si, s)| StateSummary {
                label: s.label.clone(),
                delta: s.delta_var.map(|k| x[k]),
                buses: s
                    .net
                    .buses
                    .iter()
                    .enumerate()
                    .map(|(i, b)| BusSummary {
                        id: b.id.clone(),
                        vm: x[s.v_vm(i)],
                        va: s.v_va(i).map_or(0.0, |k| x[k]),
                    })
                    .collect(),
                dc_buses: s
                    .net
                    .dc_buses
                    .iter()
                    .enumerate()
                    .map(|(d, b)| DcBusSummary {
                        id: b.id.clone(),
                        v: x[s.v_vdc(d)],
                    })
                    .collect(),
                generators: s
                    .net
                    .generators
                    .iter()
                    .enumerate()
                    .map(|(g, gen)| GenSummary {
                        id: gen.id.clone(),
                        p: x[s.v_pg(g)],
                        q: x[s.v_qg(g)],
                        cost: gen.cost.value(x[s.v_pg(g)]),
                    })
                    .collect(),
                converters: s
                    .net
                    .converters
                    .iter()
                    .enumerate()
                    .map(|(c, conv)| ConvSummary {
                        id: conv.id.clone(),
                        p_ac: x[s.v_pac(c)],
                        q_ac: x[s.v_qac(c)],
                        p_dc: x[s.v_pdc(c)],
                    })
                    .collect(),
                margins: s
                    .net
                    .generators
                    .iter()
                    .filter_map(|gen| {
                        self.margins(x, si, &gen.id).map(|(vp, vm)| MarginSummary {
                            generator: gen.id.clone(),
                            v_plus: vp,
                            v_minus: vm,
                        })
                    })
                    .collect(),
            })
            .collect();
        OpfSummary {
            objective: res.solution.objective,
            eps: res.eps,
            kkt: res.solution.kkt,
            iterations: res.solution.iterations,
            status: res.status.clone(),
            stages: res.stages.clone(),
            states,
        }
    }
}

// ---------------------------------------------------------------------------
// Consistency against the exact piecewise curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyRow {
    pub state: String,
    pub element: String,
    pub kind: String,
    /// Driver value: a voltage for converter rows, the pre-clamp power for
    /// generator response rows.
    pub input: f64,
    pub actual: f64,
    pub exact: f64,
    pub gap: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    pub max_gap: f64,
    pub all_within: bool,
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("state,element,kind,input,actual,exact,gap,bound,within_bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.state, r.element, r.kind, r.input, r.actual, r.exact, r.gap, r.bound,
                r.within_bound
            ));
        }
        out
    }
}

const CONSISTENCY_SLACK: f64 = 1e-8;

/// Compare every smooth droop row of a solved problem against its exact
/// piecewise curve. The per-row bound is `terms * eps * ln 2` plus a fixed
/// numerical slack.
pub fn verify_against_exact(problem: &OpfProblem, x: &[f64]) -> ConsistencyReport {
    let eps = problem.eps;
    let ln2 = std::f64::consts::LN_2;
    let mut rows = Vec::new();
    for (h, curve) in problem.droop_handles() {
        let s = &problem.states[h.state];
        let conv = &s.net.converters[h.conv];
        let (input, actual) = if h.qside {
            (x[s.v_vm(s.conv_ac[h.conv])], x[s.v_qac(h.conv)])
        } else {
            (x[s.v_vdc(s.conv_dc[h.conv])], x[s.v_pdc(h.conv)])
        };
        let exact = curve.exact(input);
        let gap = (actual - exact).abs();
        let bound = curve.softplus_terms() as f64 * eps * ln2 + CONSISTENCY_SLACK;
        rows.push(ConsistencyRow {
            state: s.label.clone(),
            element: conv.id.clone(),
            kind: curve.label().to_string(),
            input,
            actual,
            exact,
            gap,
            bound,
            within_bound: gap <= bound,
        });
    }
    // generator response rows in contingency states
    let base = &problem.states[0];
    for s in problem.states.iter() {
        let Some(dv) = s.delta_var else { continue };
        let delta = x[dv];
        for (j, g) in s.net.generators.iter().enumerate() {
            if !g.responding {
                continue;
            }
            let b = s.gen_base[j].unwrap();
            let pr = &g.p_response;
            let input = x[base.v_pg(b)] + pr.alpha * delta;
            let actual = x[s.v_pg(j)];
            let exact = exact_clamp(input, pr.p_min, pr.p_max);
            let gap = (actual - exact).abs();
            let bound = 2.0 * eps * ln2 + CONSISTENCY_SLACK;
            rows.push(ConsistencyRow {
                state: s.label.clone(),
                element: g.id.clone(),
                kind: "gen_p_response".to_string(),
                input,
                actual,
                exact,
                gap,
                bound,
                within_bound: gap <= bound,
            });
        }
    }
    let max_gap = rows.iter().fold(0.0f64, |m, r| m.max(r.gap));
    let all_within = rows.iter().all(|r| r.within_bound);
    ConsistencyReport {
        rows,
        max_gap,
        all_within,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::check_derivatives;

    fn case5() -> Network {
        Network::from_json(include_str!("../cases/case5_acdc.json")).unwrap()
    }

    fn cfg(s: Scenario) -> DroopModeConfig {
        DroopModeConfig::for_scenario(s, SmoothingConfig::default())
    }

    #[test]
    fn segments_reproduce_exact_curves() {
        let net = case5();
        let conv = &net.converters[0];
        let curves = [
            ConverterCurve::Linear {
                spec: conv.pvdc_linear.clone().unwrap(),
                qside: false,
            },
            ConverterCurve::Deadband {
                spec: conv.pvdc_deadband.clone().unwrap(),
                qside: false,
            },
            ConverterCurve::Linear {
                spec: conv.qvac.as_ref().unwrap().as_linear(),
                qside: true,
            },
            ConverterCurve::Deadband {
                spec: conv.qvac.as_ref().unwrap().as_deadband(),
                qside: true,
            },
        ];
        for curve in &curves {
            let segs = curve.segments();
            assert!(segs.len() == 3 || segs.len() == 5);
            // contiguous cover in ascending order
            for w in segs.windows(2) {
                assert!((w[0].v_hi - w[1].v_lo).abs() < 1e-12);
                assert_eq!(w[0].index + 1, w[1].index);
            }
            for i in 0..=400 {
                let v = 0.85 + 0.3 * i as f64 / 400.0;
                let seg = segs
                    .iter()
                    .find(|s| s.v_lo - 1e-12 <= v && v <= s.v_hi + 1e-12)
                    .unwrap();
                assert!(
                    (curve.exact(v) - (seg.a + seg.b * v)).abs() < 1e-9,
                    "{} at v={v}",
                    curve.label()
                );
            }
        }
    }

    #[test]
    fn scenario_toggles_control_droop_row_count() {
        let net = case5();
        for (scenario, expect) in [
            (Scenario::I, 0),
            (Scenario::II, 1),
            (Scenario::III, 1),
            (Scenario::IV, 2),
            (Scenario::V, 2),
        ] {
            let p = build_opf(&net, &cfg(scenario)).unwrap();
            assert_eq!(p.droop_handles().len(), expect, "scenario {scenario}");
        }
    }

    #[test]
    fn opf_derivatives_match_finite_differences() {
        let net = case5();
        for scenario in [Scenario::I, Scenario::V] {
            let p = build_opf(&net, &cfg(scenario)).unwrap();
            let mut x = p.initial_point();
            for (j, v) in x.iter_mut().enumerate() {
                *v += 1e-3 * ((j * 7919 % 13) as f64 - 6.0) / 6.0;
            }
            let rep = check_derivatives(&p, &x, 1e-6);
            assert!(
                rep.max_error() < 1e-5,
                "scenario {scenario}: {rep:?}"
            );
        }
    }

    #[test]
    fn scopf_dimension_audit() {
        let net = case5();
        let p = build_scopf(&net, &cfg(Scenario::II)).unwrap();
        let audit = p.audit();
        assert_eq!(audit.states.len(), 3);
        // base: 3 va + 5 vm + 3 vdc + 2*3 gen + 3*2 conv
        assert_eq!(audit.states[0].vars, 23);
        assert_eq!(audit.states[0].eqs, 19);
        // k1 drops g2; k2 drops a line (same vars as base)
        assert_eq!(audit.states[1].vars, 21);
        assert_eq!(audit.states[2].vars, 23);
        // one delta per contingency plus (1 + 2) margin pairs
        assert_eq!(audit.coupling_vars, 2 + 2 * 3);
        assert_eq!(
            audit.num_vars,
            23 + 21 + 23 + audit.coupling_vars
        );
        assert_eq!(audit.num_eq, p.num_eq());
        // contingency states add response rows per gen and one qv row per
        // responding gen
        assert_eq!(audit.states[1].eqs, 19 + 2 + 1);
        assert_eq!(audit.states[2].eqs, 19 + 3 + 2);
    }

    #[test]
    fn opf_scenario_ii_dispatches_wind_and_matches_droop_curve() {
        let net = case5();
        let mut p = build_opf(&net, &cfg(Scenario::II)).unwrap();
        let res = epsilon_continuation(&mut p, &IpmOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.solution.kkt <= 1e-8);
        let x = &res.solution.x;
        // offshore export is pinned by the constant-power converter c2, so
        // the wind unit covers that export plus converter losses
        let g3 = p.gen_p(x, 0, "g3").unwrap();
        assert!((0.45..0.55).contains(&g3), "g3 {g3}");
        // droop row consistency against the exact curve
        let report = verify_against_exact(&p, x);
        assert_eq!(report.rows.len(), 1);
        assert!(report.all_within, "{report:?}");
        // setpoint converter stays pinned
        let c2 = p.conv_p_dc(x, 0, "c2").unwrap();
        assert!((c2 - 0.49).abs() < 1e-7, "c2 p_dc {c2}");
    }

    #[test]
    fn opf_scenario_i_anchors_constant_power_dc_island() {
        let net = case5();
        let mut p = build_opf(&net, &cfg(Scenario::I)).unwrap();
        let res = epsilon_continuation(&mut p, &IpmOptions::default()).unwrap();
        let x = &res.solution.x;
        // anchored voltage level and both setpoints honored
        assert!((p.dc_voltage(x, 0, "d1").unwrap() - 1.0).abs() < 1e-7);
        assert!((p.conv_p_dc(x, 0, "c2").unwrap() - 0.49).abs() < 1e-7);
    }

    #[test]
    fn continuation_stages_tighten_monotonically() {
        let net = case5();
        let mut p = build_opf(&net, &cfg(Scenario::III)).unwrap();
        let res = epsilon_continuation(&mut p, &IpmOptions::default()).unwrap();
        assert!(res.stages.len() >= 2);
        for w in res.stages.windows(2) {
            assert!(w[1].eps < w[0].eps);
        }
        assert_eq!(res.eps, 1e-3);
        // objective drift between the last two stages stays small
        let n = res.stages.len();
        let drift = (res.stages[n - 1].objective - res.stages[n - 2].objective).abs();
        assert!(drift < 1e-2 * res.stages[n - 1].objective.abs().max(1.0));
    }

    #[test]
    fn scopf_couples_states_through_response_variables() {
        let net = case5();
        let mut p = build_scopf(&net, &cfg(Scenario::II)).unwrap();
        let res = epsilon_continuation(&mut p, &IpmOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        let x = &res.solution.x;
        let eps = p.epsilon();
        let k1 = p.state_index("k1").unwrap();

        // responder follows the smooth clamp of base dispatch plus alpha*delta
        let delta = p.delta(x, k1).unwrap();
        let g1_0 = p.gen_p(x, 0, "g1").unwrap();
        let g1_k = p.gen_p(x, k1, "g1").unwrap();
        let spec = &net.generators[0].p_response;
        let target = exact_clamp(g1_0 + spec.alpha * delta, spec.p_min, spec.p_max);
        assert!(
            (g1_k - target).abs() <= 2.0 * eps * std::f64::consts::LN_2 + 1e-8,
            "g1_k {g1_k} target {target}"
        );
        // losing g2 forces the responder to pick up output
        assert!(delta > 0.0, "delta {delta}");
        assert!(g1_k > g1_0);

        // non-responder is pinned exactly (tied by a linear equality row)
        let g3_0 = p.gen_p(x, 0, "g3").unwrap();
        let g3_k = p.gen_p(x, k1, "g3").unwrap();
        assert!((g3_k - g3_0).abs() <= 1e-8);

        // responder with reactive headroom holds its base voltage
        let q = p.gen_q(x, k1, "g1").unwrap();
        let (vp, vmn) = p.margins(x, k1, "g1").unwrap();
        let qv = &net.generators[0].qv;
        if vp - (q - qv.q_min) <= -10.0 * eps && vmn - (qv.q_max - q) <= -10.0 * eps {
            let v0 = p.bus_vm(x, 0, "b1").unwrap();
            let vk = p.bus_vm(x, k1, "b1").unwrap();
            assert!((vk - v0).abs() <= 5.0 * eps, "vk {vk} v0 {v0}");
        }

        // droop consistency over every state
        let report = verify_against_exact(&p, x);
        assert!(report.rows.len() >= 3);
        assert!(report.all_within, "{report:?}");
    }
}
