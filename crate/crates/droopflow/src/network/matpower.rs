//! Importer for a documented subset of the matrix-based `.m` case format.
//!
//! Supported tables: `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch`,
//! `mpc.gencost` (polynomial model, degree <= 2), plus the dc extension
//! tables `mpc.busdc`, `mpc.branchdc`, `mpc.convdc` with columns
//!
//! ```text
//! busdc:    [id, load_p, v_min, v_max]
//! branchdc: [from, to, r, rate]
//! convdc:   [id, ac_bus, dc_bus, p_dc_set, q_ac_set, loss_a, loss_b, s_max]
//! ```
//!
//! Anything the solver does not model (bus shunts, branch charging, phase
//! shift, out-of-service elements, non-polynomial or cubic-plus cost models)
//! is rejected loudly rather than dropped.

use std::collections::HashMap;

use super::{
    AcBranch, Bus, BusKind, Converter, CostPoly, DcBranch, DcBus, Generator, Network,
    NetworkError, FORMAT_VERSION,
};
use crate::curves::{GenPResponseSpec, GenQVSpec};

/// Parse a case file in the supported subset into a validated [`Network`].
pub fn import_matpower(source: &str) -> Result<Network, NetworkError> {
    let tables = parse_tables(source)?;
    let base_mva = match tables.scalars.get("baseMVA") {
        Some(&v) if v > 0.0 => v,
        Some(&v) => {
            return Err(NetworkError::Unmodeled(format!(
                "baseMVA must be positive, got {v}"
            )))
        }
        None => return Err(NetworkError::Unmodeled("missing mpc.baseMVA".into())),
    };

    let bus_rows = tables.require("bus")?;
    let gen_rows = tables.require("gen")?;
    let branch_rows = tables.require("branch")?;
    let gencost_rows = tables.matrices.get("gencost");

    let mut buses = Vec::new();
    let mut bus_kind: HashMap<i64, BusKind> = HashMap::new();
    for row in bus_rows {
        expect_cols("bus", row, 13)?;
        let id = row[0] as i64;
        let kind = match row[1] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => {
                return Err(NetworkError::Unmodeled(format!(
                    "bus {id} is isolated (type 4); remove it before import"
                )))
            }
            t => {
                return Err(NetworkError::Unmodeled(format!(
                    "bus {id} has unknown type {t}"
                )))
            }
        };
        if row[4] != 0.0 || row[5] != 0.0 {
            return Err(NetworkError::Unmodeled(format!(
                "bus {id} has a shunt (Gs/Bs nonzero); shunts are not modeled"
            )));
        }
        bus_kind.insert(id, kind);
        buses.push(Bus {
            id: format!("bus{id}"),
            kind,
            v_min: row[12],
            v_max: row[11],
            v_set: row[7],
            load_p: row[2] / base_mva,
            load_q: row[3] / base_mva,
            islanded: false,
        });
    }

    if let Some(costs) = gencost_rows {
        if costs.len() != gen_rows.len() {
            return Err(NetworkError::Unmodeled(format!(
                "gencost has {} rows for {} generators",
                costs.len(),
                gen_rows.len()
            )));
        }
    }

    let mut generators = Vec::new();
    for (i, row) in gen_rows.iter().enumerate() {
        expect_min_cols("gen", row, 10)?;
        let bus = row[0] as i64;
        if row[7] == 0.0 {
            return Err(NetworkError::Unmodeled(format!(
                "generator {} at bus {bus} is out of service; remove it before import",
                i + 1
            )));
        }
        let (p_min, p_max) = (row[9] / base_mva, row[8] / base_mva);
        let p_base = (row[1] / base_mva).clamp(p_min, p_max);
        let v_set = row[5];
        let bus_entry = buses
            .iter()
            .find(|b| b.id == format!("bus{bus}"))
            .ok_or_else(|| NetworkError::NotFound(format!("bus{bus}")))?;
        generators.push(Generator {
            id: format!("gen{}", i + 1),
            bus_id: format!("bus{bus}"),
            cost: gencost_rows
                .map(|rows| parse_cost(&rows[i], i))
                .transpose()?
                .unwrap_or(CostPoly {
                    c0: 0.0,
                    c1: 0.0,
                    c2: 0.0,
                }),
            q_min: row[4] / base_mva,
            q_max: row[3] / base_mva,
            p_response: GenPResponseSpec {
                p_base,
                alpha: 1.0,
                p_min,
                p_max,
            },
            qv: GenQVSpec {
                v_base: v_set,
                q_min: row[4] / base_mva,
                q_max: row[3] / base_mva,
                v_min: bus_entry.v_min,
                v_max: bus_entry.v_max,
            },
            responding: true,
        });
    }

    let mut ac_branches = Vec::new();
    for (i, row) in branch_rows.iter().enumerate() {
        expect_min_cols("branch", row, 11)?;
        let (f, t) = (row[0] as i64, row[1] as i64);
        if row[4] != 0.0 {
            return Err(NetworkError::Unmodeled(format!(
                "branch {f}-{t} has line charging (b nonzero); charging is not modeled"
            )));
        }
        if row.len() > 9 && row[9] != 0.0 {
            return Err(NetworkError::Unmodeled(format!(
                "branch {f}-{t} has a phase shift; phase shifters are not modeled"
            )));
        }
        if row[10] == 0.0 {
            return Err(NetworkError::Unmodeled(format!(
                "branch {f}-{t} is out of service; remove it before import"
            )));
        }
        let tap = row[8];
        ac_branches.push(AcBranch {
            id: format!("branch{}", i + 1),
            from_id: format!("bus{f}"),
            to_id: format!("bus{t}"),
            resistance: row[2],
            reactance: row[3],
            s_max: row[5] / base_mva,
            tap: if tap == 0.0 || tap == 1.0 { None } else { Some(tap) },
        });
    }

    let mut dc_buses = Vec::new();
    if let Some(rows) = tables.matrices.get("busdc") {
        for row in rows {
            expect_cols("busdc", row, 4)?;
            dc_buses.push(DcBus {
                id: format!("dcbus{}", row[0] as i64),
                v_min: row[2],
                v_max: row[3],
                load_p: row[1] / base_mva,
                islanded: false,
            });
        }
    }

    let mut dc_branches = Vec::new();
    if let Some(rows) = tables.matrices.get("branchdc") {
        for (i, row) in rows.iter().enumerate() {
            expect_cols("branchdc", row, 4)?;
            dc_branches.push(DcBranch {
                id: format!("dcbranch{}", i + 1),
                from_id: format!("dcbus{}", row[0] as i64),
                to_id: format!("dcbus{}", row[1] as i64),
                resistance: row[2],
                p_max: row[3] / base_mva,
            });
        }
    }

    let mut converters = Vec::new();
    if let Some(rows) = tables.matrices.get("convdc") {
        for row in rows {
            expect_cols("convdc", row, 8)?;
            converters.push(Converter {
                id: format!("conv{}", row[0] as i64),
                ac_bus_id: format!("bus{}", row[1] as i64),
                dc_bus_id: format!("dcbus{}", row[2] as i64),
                loss_a: row[5] / base_mva,
                loss_b: row[6] / base_mva,
                s_max: row[7] / base_mva,
                p_dc_set: row[3] / base_mva,
                q_ac_set: row[4] / base_mva,
                pvdc_linear: None,
                pvdc_deadband: None,
                qvac: None,
            });
        }
    }

    for name in tables.matrices.keys() {
        if !matches!(
            name.as_str(),
            "bus" | "gen" | "branch" | "gencost" | "busdc" | "branchdc" | "convdc"
        ) {
            return Err(NetworkError::Unmodeled(format!(
                "unsupported table mpc.{name}"
            )));
        }
    }

    let net = Network {
        version: FORMAT_VERSION,
        base_mva,
        buses,
        generators,
        ac_branches,
        dc_buses,
        dc_branches,
        converters,
        contingencies: Vec::new(),
    };
    let report = net.validate();
    if !report.is_empty() {
        return Err(NetworkError::Validation(report));
    }
    Ok(net)
}

fn parse_cost(row: &[f64], gen_idx: usize) -> Result<CostPoly, NetworkError> {
    expect_min_cols("gencost", row, 4)?;
    if row[0] as i64 != 2 {
        return Err(NetworkError::Unmodeled(format!(
            "gencost row {} uses model {}, only polynomial (2) is supported",
            gen_idx + 1,
            row[0]
        )));
    }
    let n = row[3] as usize;
    if row.len() != 4 + n {
        return Err(NetworkError::Unmodeled(format!(
            "gencost row {} declares {n} coefficients but has {}",
            gen_idx + 1,
            row.len() - 4
        )));
    }
    // coefficients are highest order first, cost in currency/MWh over MW;
    // rescale to per-unit power
    let coeffs = &row[4..];
    match n {
        0 => Ok(CostPoly { c0: 0.0, c1: 0.0, c2: 0.0 }),
        1 => Ok(CostPoly { c0: coeffs[0], c1: 0.0, c2: 0.0 }),
        2 => Ok(CostPoly { c0: coeffs[1], c1: coeffs[0], c2: 0.0 }),
        3 => Ok(CostPoly { c0: coeffs[2], c1: coeffs[1], c2: coeffs[0] }),
        _ => Err(NetworkError::Unmodeled(format!(
            "gencost row {} has degree {} > 2",
            gen_idx + 1,
            n - 1
        ))),
    }
}

fn expect_cols(table: &str, row: &[f64], n: usize) -> Result<(), NetworkError> {
    if row.len() != n {
        return Err(NetworkError::Unmodeled(format!(
            "{table} row has {} columns, expected {n}",
            row.len()
        )));
    }
    Ok(())
}

fn expect_min_cols(table: &str, row: &[f64], n: usize) -> Result<(), NetworkError> {
    if row.len() < n {
        return Err(NetworkError::Unmodeled(format!(
            "{table} row has {} columns, expected at least {n}",
            row.len()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Tables {
    scalars: HashMap<String, f64>,
    matrices: HashMap<String, Vec<Vec<f64>>>,
}

impl Tables {
    fn require(&self, name: &str) -> Result<&Vec<Vec<f64>>, NetworkError> {
        self.matrices
            .get(name)
            .ok_or_else(|| NetworkError::Unmodeled(format!("missing table mpc.{name}")))
    }
}

/// Minimal tokenizer for `mpc.<name> = <scalar>;` and
/// `mpc.<name> = [ rows... ];` assignments. Comments (`%`) run to end of line.
fn parse_tables(source: &str) -> Result<Tables, NetworkError> {
    let mut tables = Tables::default();
    let mut lines = source.lines().enumerate().peekable();
    while let Some((lineno, raw)) = lines.next() {
        let line = strip_comment(raw).trim();
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some(eq) = rest.find('=') else {
            continue;
        };
        let name = rest[..eq].trim().to_string();
        let mut value = rest[eq + 1..].trim().to_string();
        if !value.starts_with('[') {
            // scalar assignment
            let v = value.trim_end_matches(';').trim();
            // string-valued fields like mpc.version are ignored
            if let Ok(num) = v.trim_matches('\'').parse::<f64>() {
                if v.starts_with('\'') {
                    continue;
                }
                tables.scalars.insert(name, num);
            }
            continue;
        }
        // matrix: accumulate lines until the closing bracket
        while !value.contains(']') {
            match lines.next() {
                Some((_, next)) => {
                    value.push('\n');
                    value.push_str(strip_comment(next).trim());
                }
                None => {
                    return Err(NetworkError::Parse {
                        line: lineno + 1,
                        column: 1,
                        message: format!("unterminated matrix mpc.{name}"),
                    })
                }
            }
        }
        let body = value
            .trim_start_matches('[')
            .split(']')
            .next()
            .unwrap_or("");
        let mut rows = Vec::new();
        for row_src in body.split([';', '\n']) {
            let row_src = row_src.trim();
            if row_src.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in row_src.split([' ', '\t', ',']) {
                if tok.is_empty() {
                    continue;
                }
                row.push(tok.parse::<f64>().map_err(|_| NetworkError::Parse {
                    line: lineno + 1,
                    column: 1,
                    message: format!("bad numeric token {tok:?} in mpc.{name}"),
                })?);
            }
            if !row.is_empty() {
                rows.push(row);
            }
        }
        tables.matrices.insert(name, rows);
    }
    Ok(tables)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(i) => &line[..i],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE3: &str = r#"
function mpc = case3_acdc
mpc.version = '2';
mpc.baseMVA = 100;

%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1 3 0    0   0 0 1 1.02 0 345 1 1.1 0.9;
    2 2 0    0   0 0 1 1.01 0 345 1 1.1 0.9;
    3 1 80  20   0 0 1 1.00 0 345 1 1.1 0.9;
];

%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
    1 60 0 100 -100 1.02 100 1 150 10;
    2 40 0  80  -80 1.01 100 1 100 10;
];

%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
mpc.branch = [
    1 2 0.01 0.05 0 150 0 0 0 0 1 -360 360;
    1 3 0.02 0.08 0 120 0 0 0 0 1 -360 360;
    2 3 0.02 0.08 0 120 0 0 0 0 1 -360 360;
];

%% model startup shutdown n c2 c1 c0
mpc.gencost = [
    2 0 0 3 10 30 0;
    2 0 0 3 15 25 0;
];

%% id load_p v_min v_max
mpc.busdc = [
    1 0 0.9 1.1;
    2 0 0.9 1.1;
];

%% from to r rate
mpc.branchdc = [
    1 2 0.01 100;
];

%% id ac_bus dc_bus p_dc_set q_ac_set loss_a loss_b s_max
mpc.convdc = [
    1 2 1 -40 0 0.5 1.0 100;
    2 3 2  41 0 0.5 1.0 100;
];
"#;

    #[test]
    fn imports_supported_subset() {
        let net = import_matpower(CASE3).unwrap();
        assert_eq!(net.base_mva, 100.0);
        assert_eq!(net.buses.len(), 3);
        assert_eq!(net.buses[0].kind, BusKind::Slack);
        assert_eq!(net.buses[2].load_p, 0.8);
        assert_eq!(net.generators.len(), 2);
        assert_eq!(net.generators[0].cost.c2, 10.0);
        assert_eq!(net.generators[0].p_response.p_max, 1.5);
        assert_eq!(net.ac_branches.len(), 3);
        assert_eq!(net.ac_branches[0].s_max, 1.5);
        assert_eq!(net.dc_buses.len(), 2);
        assert_eq!(net.dc_branches.len(), 1);
        assert_eq!(net.converters.len(), 2);
        assert_eq!(net.converters[0].p_dc_set, -0.4);
        // imports are valid droopflow-net documents
        assert!(net.validate().is_empty());
    }

    #[test]
    fn rejects_bus_shunt() {
        let bad = CASE3.replace("3 1 80  20   0 0", "3 1 80  20   0 5");
        match import_matpower(&bad) {
            Err(NetworkError::Unmodeled(msg)) => assert!(msg.contains("shunt")),
            other => panic!("expected unmodeled error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_line_charging() {
        let bad = CASE3.replace("1 2 0.01 0.05 0 150", "1 2 0.01 0.05 0.02 150");
        match import_matpower(&bad) {
            Err(NetworkError::Unmodeled(msg)) => assert!(msg.contains("charging")),
            other => panic!("expected unmodeled error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_piecewise_cost_model() {
        let bad = CASE3.replace("2 0 0 3 10 30 0", "1 0 0 3 10 30 0");
        match import_matpower(&bad) {
            Err(NetworkError::Unmodeled(msg)) => assert!(msg.contains("polynomial")),
            other => panic!("expected unmodeled error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_table() {
        let bad = format!("{CASE3}\nmpc.dcline = [ 1 2 3 ];\n");
        match import_matpower(&bad) {
            Err(NetworkError::Unmodeled(msg)) => assert!(msg.contains("dcline")),
            other => panic!("expected unmodeled error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_token_with_line() {
        let bad = CASE3.replace("1 2 0.01 0.05", "1 2 0.0x1 0.05");
        assert!(matches!(
            import_matpower(&bad),
            Err(NetworkError::Parse { .. })
        ));
    }
}
