//! AC-DC network data model, file ingestion, validation, and contingency
//! application.
//!
//! The canonical on-disk format is the versioned `droopflow-net` JSON schema
//! (version 1). A documented subset of the common matrix-based case format is
//! importable via [`matpower`].

pub mod matpower;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curves::{GenPResponseSpec, GenQVSpec, PVdcDeadbandSpec, PVdcLinearSpec, QVacSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("network validation failed:\n{0}")]
    Validation(ValidationReport),
    #[error("unsupported format version {0}, expected {FORMAT_VERSION}")]
    Version(u32),
    #[error("element not found: {0}")]
    NotFound(String),
    #[error("infeasible contingency {id}: {reason}")]
    InfeasibleContingency { id: String, reason: String },
    #[error("unmodeled data in case file: {0}")]
    Unmodeled(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
    /// Voltage setpoint for slack and PV buses.
    #[serde(default = "default_one")]
    pub v_set: f64,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
    /// Set by contingency application when the bus loses its path to a slack.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub islanded: bool,
}

fn default_one() -> f64 {
    1.0
}

/// Generation cost polynomial `c2*p^2 + c1*p + c0` (currency/hr, p in per-unit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostPoly {
    #[serde(default)]
    pub c0: f64,
    #[serde(default)]
    pub c1: f64,
    #[serde(default)]
    pub c2: f64,
}

impl CostPoly {
    #[inline]
    pub fn value(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    #[inline]
    pub fn deriv(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: String,
    pub bus_id: String,
    pub cost: CostPoly,
    pub q_min: f64,
    pub q_max: f64,
    pub p_response: GenPResponseSpec,
    pub qv: GenQVSpec,
    /// Whether the unit participates in post-contingency frequency response.
    #[serde(default = "default_true")]
    pub responding: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcBranch {
    pub id: String,
    pub from_id: String,
    pub to_id: String,
    pub resistance: f64,
    pub reactance: f64,
    /// Apparent power thermal limit, per-unit.
    pub s_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcBus {
    pub id: String,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub islanded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcBranch {
    pub id: String,
    pub from_id: String,
    pub to_id: String,
    pub resistance: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Converter {
    pub id: String,
    pub ac_bus_id: String,
    pub dc_bus_id: String,
    /// Constant loss term, per-unit.
    pub loss_a: f64,
    /// Loss term linear in loading `|S_ac| / s_max`, per-unit.
    pub loss_b: f64,
    pub s_max: f64,
    /// DC-side power setpoint used when no droop curve is active.
    pub p_dc_set: f64,
    /// AC-side reactive setpoint used when Q-Vac droop is not active.
    #[serde(default)]
    pub q_ac_set: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pvdc_linear: Option<PVdcLinearSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pvdc_deadband: Option<PVdcDeadbandSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qvac: Option<QVacSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageKind {
    Generator,
    AcBranch,
    Converter,
    DcBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContingencySpec {
    pub id: String,
    pub outage: OutageKind,
    pub element: String,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub version: u32,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub ac_branches: Vec<AcBranch>,
    pub dc_buses: Vec<DcBus>,
    pub dc_branches: Vec<DcBranch>,
    pub converters: Vec<Converter>,
    #[serde(default)]
    pub contingencies: Vec<ContingencySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub element: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, element: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            element: element.into(),
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for issue in &self.issues {
            writeln!(f, "  {}: {}", issue.element, issue.message)?;
        }
        Ok(())
    }
}

impl Network {
    /// Parse and fully validate a droopflow-net v1 JSON document.
    pub fn from_json(source: &str) -> Result<Self, NetworkError> {
        let net: Network = serde_json::from_str(source).map_err(|e| NetworkError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if net.version != FORMAT_VERSION {
            return Err(NetworkError::Version(net.version));
        }
        let report = net.validate();
        if !report.is_empty() {
            return Err(NetworkError::Validation(report));
        }
        Ok(net)
    }

    pub fn from_json_reader(mut reader: impl std::io::Read) -> Result<Self, NetworkError> {
        let mut buf = String::new();
        reader.read_to_string(&mut buf)?;
        Self::from_json(&buf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }

    /// Check every structural invariant. Returns one issue per violation and
    /// never fails outright.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if !(self.base_mva > 0.0) {
            report.push("network", format!("base_mva must be positive, got {}", self.base_mva));
        }
        if self.generators.is_empty() {
            report.push("network", "at least one generator is required");
        }

        let bus_ids: HashSet<&str> = self.buses.iter().map(|b| b.id.as_str()).collect();
        let dc_bus_ids: HashSet<&str> = self.dc_buses.iter().map(|b| b.id.as_str()).collect();
        check_unique(self.buses.iter().map(|b| b.id.as_str()), "bus", &mut report);
        check_unique(self.dc_buses.iter().map(|b| b.id.as_str()), "dc bus", &mut report);
        check_unique(self.generators.iter().map(|g| g.id.as_str()), "generator", &mut report);
        check_unique(self.ac_branches.iter().map(|b| b.id.as_str()), "ac branch", &mut report);
        check_unique(self.dc_branches.iter().map(|b| b.id.as_str()), "dc branch", &mut report);
        check_unique(self.converters.iter().map(|c| c.id.as_str()), "converter", &mut report);

        for bus in &self.buses {
            if !(bus.v_min <= bus.v_max) {
                report.push(&bus.id, format!("v_min {} > v_max {}", bus.v_min, bus.v_max));
            }
            if !(bus.v_min > 0.0) {
                report.push(&bus.id, format!("v_min must be positive, got {}", bus.v_min));
            }
        }
        for bus in &self.dc_buses {
            if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
                report.push(&bus.id, format!("dc voltage bounds [{}, {}] invalid", bus.v_min, bus.v_max));
            }
        }

        // one slack per AC island
        for (island_idx, island) in self.ac_islands().iter().enumerate() {
            let slacks = island
                .iter()
                .filter(|&&b| self.buses[b].kind == BusKind::Slack && !self.buses[b].islanded)
                .count();
            let any_active = island.iter().any(|&b| !self.buses[b].islanded);
            if any_active && slacks != 1 {
                report.push(
                    format!("ac island {island_idx}"),
                    format!("expected exactly one slack bus, found {slacks}"),
                );
            }
        }

        for gen in &self.generators {
            if !bus_ids.contains(gen.bus_id.as_str()) {
                report.push(&gen.id, format!("references missing bus {}", gen.bus_id));
            }
            if gen.q_min > gen.q_max {
                report.push(&gen.id, format!("q_min {} > q_max {}", gen.q_min, gen.q_max));
            }
            if let Err(e) = gen.p_response.validate() {
                report.push(&gen.id, e.to_string());
            }
            if let Err(e) = gen.qv.validate() {
                report.push(&gen.id, e.to_string());
            }
        }

        for br in &self.ac_branches {
            for end in [&br.from_id, &br.to_id] {
                if !bus_ids.contains(end.as_str()) {
                    report.push(&br.id, format!("references missing bus {end}"));
                }
            }
            if br.resistance.hypot(br.reactance) <= 0.0 {
                report.push(&br.id, "series impedance magnitude must be positive");
            }
            if !(br.s_max > 0.0) {
                report.push(&br.id, format!("thermal limit must be positive, got {}", br.s_max));
            }
            if let Some(tap) = br.tap {
                if !(tap > 0.0) {
                    report.push(&br.id, format!("transformer tap must be positive, got {tap}"));
                }
            }
        }

        for br in &self.dc_branches {
            for end in [&br.from_id, &br.to_id] {
                if !dc_bus_ids.contains(end.as_str()) {
                    report.push(&br.id, format!("references missing dc bus {end}"));
                }
            }
            if !(br.resistance > 0.0) {
                report.push(&br.id, format!("resistance must be positive, got {}", br.resistance));
            }
        }

        for conv in &self.converters {
            if !bus_ids.contains(conv.ac_bus_id.as_str()) {
                report.push(&conv.id, format!("references missing ac bus {}", conv.ac_bus_id));
            }
            if !dc_bus_ids.contains(conv.dc_bus_id.as_str()) {
                report.push(&conv.id, format!("references missing dc bus {}", conv.dc_bus_id));
            }
            if !(conv.s_max > 0.0) {
                report.push(&conv.id, format!("s_max must be positive, got {}", conv.s_max));
            }
            if conv.loss_a < 0.0 || conv.loss_b < 0.0 {
                report.push(&conv.id, "loss coefficients must be nonnegative");
            }
            if let Some(spec) = &conv.pvdc_linear {
                if let Err(e) = spec.validate() {
                    report.push(&conv.id, e.to_string());
                }
            }
            if let Some(spec) = &conv.pvdc_deadband {
                if let Err(e) = spec.validate() {
                    report.push(&conv.id, e.to_string());
                }
            }
            if let Some(spec) = &conv.qvac {
                if let Err(e) = spec.validate() {
                    report.push(&conv.id, e.to_string());
                }
            }
        }

        for c in &self.contingencies {
            let exists = match c.outage {
                OutageKind::Generator => self.generators.iter().any(|g| g.id == c.element),
                OutageKind::AcBranch => self.ac_branches.iter().any(|b| b.id == c.element),
                OutageKind::Converter => self.converters.iter().any(|v| v.id == c.element),
                OutageKind::DcBranch => self.dc_branches.iter().any(|b| b.id == c.element),
            };
            if !exists {
                report.push(&c.id, format!("outaged element {} does not exist", c.element));
            }
        }

        report
    }

    /// Connected components of the AC graph, as index sets into `buses`.
    pub fn ac_islands(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for br in &self.ac_branches {
            if let (Some(&f), Some(&t)) = (index.get(br.from_id.as_str()), index.get(br.to_id.as_str())) {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        components(self.buses.len(), &adj)
    }

    /// Connected components of the DC graph, as index sets into `dc_buses`.
    pub fn dc_islands(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .dc_buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect();
        let mut adj = vec![Vec::new(); self.dc_buses.len()];
        for br in &self.dc_branches {
            if let (Some(&f), Some(&t)) = (index.get(br.from_id.as_str()), index.get(br.to_id.as_str())) {
                adj[f].push(t);
                adj[t].push(f);
            }
        }
        components(self.dc_buses.len(), &adj)
    }

    /// Derive the post-contingency network: the outaged element is removed,
    /// the input is untouched, and buses left without support are flagged.
    pub fn apply_contingency(&self, c: &ContingencySpec) -> Result<Network, NetworkError> {
        let mut net = self.clone();
        net.contingencies.clear(); // derived states are not contingency-screened again
        let found = match c.outage {
            OutageKind::Generator => {
                let n = net.generators.len();
                net.generators.retain(|g| g.id != c.element);
                net.generators.len() < n
            }
            OutageKind::AcBranch => {
                let n = net.ac_branches.len();
                net.ac_branches.retain(|b| b.id != c.element);
                net.ac_branches.len() < n
            }
            OutageKind::Converter => {
                let n = net.converters.len();
                net.converters.retain(|v| v.id != c.element);
                net.converters.len() < n
            }
            OutageKind::DcBranch => {
                let n = net.dc_branches.len();
                net.dc_branches.retain(|b| b.id != c.element);
                net.dc_branches.len() < n
            }
        };
        if !found {
            return Err(NetworkError::NotFound(c.element.clone()));
        }

        // AC buses must keep a path to a slack bus; a split that strands load
        // or generation is infeasible.
        for island in net.ac_islands() {
            let has_slack = island.iter().any(|&b| net.buses[b].kind == BusKind::Slack);
            if has_slack {
                continue;
            }
            let stranded = island.iter().any(|&b| {
                let bus = &net.buses[b];
                bus.load_p != 0.0
                    || bus.load_q != 0.0
                    || net.generators.iter().any(|g| g.bus_id == bus.id)
                    || net.converters.iter().any(|v| v.ac_bus_id == bus.id)
            });
            if stranded {
                return Err(NetworkError::InfeasibleContingency {
                    id: c.id.clone(),
                    reason: format!(
                        "ac buses [{}] disconnected from every slack bus",
                        island
                            .iter()
                            .map(|&b| net.buses[b].id.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                });
            }
            for &b in &island {
                net.buses[b].islanded = true;
            }
        }

        // DC islands without a converter have no injection or anchor: flag them.
        for island in net.dc_islands() {
            let has_converter = island
                .iter()
                .any(|&d| net.converters.iter().any(|v| v.dc_bus_id == net.dc_buses[d].id));
            if !has_converter {
                for &d in &island {
                    net.dc_buses[d].islanded = true;
                }
            }
        }

        Ok(net)
    }

    pub fn bus_index(&self) -> HashMap<&str, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    pub fn dc_bus_index(&self) -> HashMap<&str, usize> {
        self.dc_buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.as_str(), i))
            .collect()
    }

    pub fn generators_at<'a>(&'a self, bus_id: &'a str) -> impl Iterator<Item = &'a Generator> {
        self.generators.iter().filter(move |g| g.bus_id == bus_id)
    }
}

fn check_unique<'a>(
    ids: impl Iterator<Item = &'a str>,
    kind: &str,
    report: &mut ValidationReport,
) {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            report.push(id, format!("duplicate {kind} id"));
        }
    }
}

fn components(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "version": 1,
            "base_mva": 100.0,
            "buses": [
                {"id": "b1", "kind": "slack", "v_min": 0.9, "v_max": 1.1, "v_set": 1.0},
                {"id": "b2", "kind": "pq", "v_min": 0.9, "v_max": 1.1, "load_p": 0.5, "load_q": 0.1}
            ],
            "generators": [
                {"id": "g1", "bus_id": "b1", "cost": {"c1": 20.0},
                 "q_min": -1.0, "q_max": 1.0,
                 "p_response": {"p_base": 0.5, "alpha": 1.0, "p_min": 0.0, "p_max": 1.5},
                 "qv": {"v_base": 1.0, "q_min": -1.0, "q_max": 1.0, "v_min": 0.9, "v_max": 1.1}}
            ],
            "ac_branches": [
                {"id": "l1", "from_id": "b1", "to_id": "b2",
                 "resistance": 0.01, "reactance": 0.05, "s_max": 1.5}
            ],
            "dc_buses": [],
            "dc_branches": [],
            "converters": []
        }"#
        .to_string()
    }

    #[test]
    fn minimal_case_loads() {
        let net = Network::from_json(&minimal_json()).unwrap();
        assert_eq!(net.buses.len(), 2);
        assert_eq!(net.ac_branches.len(), 1);
        assert_eq!(net.generators.len(), 1);
    }

    #[test]
    fn unknown_fields_rejected_with_location() {
        let bad = minimal_json().replace("\"base_mva\": 100.0", "\"base_mva\": 100.0, \"frobnicate\": 1");
        match Network::from_json(&bad) {
            Err(NetworkError::Parse { line, message, .. }) => {
                assert!(line > 0);
                assert!(message.contains("frobnicate"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_dc_bus_reference_names_converter() {
        let mut net = Network::from_json(&minimal_json()).unwrap();
        net.converters.push(Converter {
            id: "c1".into(),
            ac_bus_id: "b2".into(),
            dc_bus_id: "nope".into(),
            loss_a: 0.0,
            loss_b: 0.0,
            s_max: 1.0,
            p_dc_set: 0.0,
            q_ac_set: 0.0,
            pvdc_linear: None,
            pvdc_deadband: None,
            qvac: None,
        });
        let report = net.validate();
        assert_eq!(report.issues.len(), 1);
        assert_eq!(report.issues[0].element, "c1");
        assert!(report.issues[0].message.contains("nope"));
    }

    #[test]
    fn inverted_voltage_bounds_reported_once() {
        let mut net = Network::from_json(&minimal_json()).unwrap();
        net.buses[1].v_min = 1.2;
        let report = net.validate();
        assert_eq!(report.issues.len(), 1);
        assert_eq!(report.issues[0].element, "b2");
    }

    #[test]
    fn bad_deadband_cites_converter() {
        let mut net = Network::from_json(&minimal_json()).unwrap();
        net.dc_buses.push(DcBus {
            id: "d1".into(),
            v_min: 0.9,
            v_max: 1.1,
            load_p: 0.0,
            islanded: false,
        });
        net.converters.push(Converter {
            id: "c1".into(),
            ac_bus_id: "b2".into(),
            dc_bus_id: "d1".into(),
            loss_a: 0.0,
            loss_b: 0.0,
            s_max: 1.0,
            p_dc_set: 0.0,
            q_ac_set: 0.0,
            pvdc_linear: None,
            pvdc_deadband: Some(crate::curves::PVdcDeadbandSpec {
                p_ref: -0.5,
                k_droop: 0.1,
                k_outer: None,
                db_lo: 1.02,
                db_hi: 0.98,
                v_min: 0.95,
                v_max: 1.05,
            }),
            qvac: None,
        });
        let report = net.validate();
        assert!(report.issues.iter().any(|i| i.element == "c1"));
    }

    #[test]
    fn json_round_trip_is_identity() {
        let net = Network::from_json(&minimal_json()).unwrap();
        let back = Network::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn generator_outage_leaves_rest_untouched() {
        let net = Network::from_json(&minimal_json()).unwrap();
        let c = ContingencySpec {
            id: "k1".into(),
            outage: OutageKind::Generator,
            element: "g1".into(),
            label: String::new(),
        };
        let before = net.clone();
        let derived = net.apply_contingency(&c).unwrap();
        assert_eq!(net, before); // input not mutated
        assert!(derived.generators.is_empty());
        assert_eq!(derived.buses, net.buses);
        assert_eq!(derived.ac_branches, net.ac_branches);
    }

    #[test]
    fn missing_element_outage_is_not_found() {
        let net = Network::from_json(&minimal_json()).unwrap();
        let c = ContingencySpec {
            id: "k1".into(),
            outage: OutageKind::AcBranch,
            element: "does-not-exist".into(),
            label: String::new(),
        };
        assert!(matches!(
            net.apply_contingency(&c),
            Err(NetworkError::NotFound(_))
        ));
    }

    #[test]
    fn disconnecting_branch_outage_is_infeasible() {
        let net = Network::from_json(&minimal_json()).unwrap();
        let c = ContingencySpec {
            id: "k1".into(),
            outage: OutageKind::AcBranch,
            element: "l1".into(),
            label: String::new(),
        };
        // removing l1 strands the load at b2
        assert!(matches!(
            net.apply_contingency(&c),
            Err(NetworkError::InfeasibleContingency { .. })
        ));
    }

    #[test]
    fn bundled_cases_load_and_round_trip() {
        for name in ["case2_min.json", "case5_acdc.json"] {
            let path = format!("{}/cases/{}", env!("CARGO_MANIFEST_DIR"), name);
            let text = std::fs::read_to_string(&path).unwrap();
            let net = Network::from_json(&text).unwrap();
            assert_eq!(Network::from_json(&net.to_json()).unwrap(), net);
        }
    }

    #[test]
    fn bundled_acdc_case_contingencies_apply() {
        let path = format!("{}/cases/case5_acdc.json", env!("CARGO_MANIFEST_DIR"));
        let net = Network::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(net.ac_islands().len(), 2); // mainland + offshore
        assert_eq!(net.dc_islands().len(), 1);
        for c in &net.contingencies {
            let derived = net.apply_contingency(c).unwrap();
            assert!(derived.validate().is_empty());
            assert!(derived.buses.iter().all(|b| !b.islanded));
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let bad = minimal_json().replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            Network::from_json(&bad),
            Err(NetworkError::Version(7))
        ));
    }
}
