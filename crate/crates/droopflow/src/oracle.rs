//! Exact piecewise baseline: enumerate one linear segment per droop device,
//! solve every resulting smooth-free NLP, and keep the best feasible one.
//!
//! This is exponential in the number of droop devices and only intended for
//! small validation instances; [`MAX_ASSIGNMENTS`] caps the product.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::exec::map_batch;
use crate::network::Network;
use crate::nlp::{solve_ipm, IpmOptions, IpmSolution};
use crate::opf::{build_opf, DroopHandle, DroopModeConfig, OpfError, OpfProblem, Segment};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{0} segment assignments exceed the enumeration cap of {MAX_ASSIGNMENTS}")]
    TooLarge(usize),
    #[error("all {0} segment assignments were infeasible")]
    AllInfeasible(usize),
    #[error(transparent)]
    Opf(#[from] OpfError),
}

pub const MAX_ASSIGNMENTS: usize = 625;

/// Feasibility tolerance on the segment interval inequalities.
pub const INTERVAL_TOL: f64 = 1e-6;

/// One device pinned to one exact segment.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentChoice {
    pub state: String,
    pub element: String,
    pub kind: String,
    /// 1-based segment index in ascending driver voltage.
    pub segment: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentAssignment {
    pub choices: Vec<SegmentChoice>,
}

impl SegmentAssignment {
    /// Compact key like `base/c1/pvdc_linear:2`, joined with `|`.
    pub fn key(&self) -> String {
        self.choices
            .iter()
            .map(|c| format!("{}/{}/{}:{}", c.state, c.element, c.kind, c.segment))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Cartesian product of per-device segment index lists, lexicographic in
/// device order.
fn cartesian(sizes: &[usize]) -> Result<Vec<Vec<usize>>, OracleError> {
    let total = sizes.iter().try_fold(1usize, |acc, &s| {
        acc.checked_mul(s).filter(|&t| t <= MAX_ASSIGNMENTS)
    });
    let Some(total) = total else {
        let approx = sizes.iter().map(|&s| s as f64).product::<f64>();
        return Err(OracleError::TooLarge(approx as usize));
    };
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; sizes.len()];
    loop {
        out.push(idx.clone());
        let mut k = sizes.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// All segment assignments of the droop devices in an OPF over `net`.
pub fn enumerate_segments(
    net: &Network,
    cfg: &DroopModeConfig,
) -> Result<Vec<SegmentAssignment>, OracleError> {
    let problem = build_opf(net, cfg)?;
    let handles = problem.droop_handles();
    let segments: Vec<Vec<Segment>> = handles.iter().map(|(_, c)| c.segments()).collect();
    let sizes: Vec<usize> = segments.iter().map(Vec::len).collect();
    let product = cartesian(&sizes)?;
    Ok(product
        .iter()
        .map(|combo| describe_assignment(&problem, &handles, &segments, combo))
        .collect())
}

fn describe_assignment(
    problem: &OpfProblem,
    handles: &[(DroopHandle, crate::opf::ConverterCurve)],
    segments: &[Vec<Segment>],
    combo: &[usize],
) -> SegmentAssignment {
    SegmentAssignment {
        choices: handles
            .iter()
            .enumerate()
            .map(|(d, (h, curve))| SegmentChoice {
                state: problem.states()[h.state].label.clone(),
                element: problem.states()[h.state].net.converters[h.conv].id.clone(),
                kind: curve.label().to_string(),
                segment: segments[d][combo[d]].index,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AssignmentRecord {
    pub assignment: SegmentAssignment,
    pub status: String,
    pub objective: Option<f64>,
    pub solve_time_s: f64,
}

pub fn records_csv(records: &[AssignmentRecord]) -> String {
    let mut out = String::from("assignment,status,objective,solve_time_s\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.assignment.key(),
            r.status,
            r.objective.map_or(String::new(), |o| o.to_string()),
            r.solve_time_s
        ));
    }
    out
}

#[derive(Debug)]
pub struct OracleOutcome {
    pub best: IpmSolution,
    pub best_assignment: SegmentAssignment,
    pub objective: f64,
    /// Per-assignment bookkeeping in enumeration order.
    pub records: Vec<AssignmentRecord>,
    /// Sum of per-assignment solve times (the serial enumeration cost).
    pub total_time_s: f64,
    pub wall_time_s: f64,
}

/// Solve the exact piecewise OPF by exhaustive segment enumeration.
///
/// Infeasible assignments (solver failure, or an interval inequality violated
/// beyond [`INTERVAL_TOL`]) are discarded. Ties within `1e-6` in objective go
/// to the lexicographically lowest segment assignment, i.e. the first one in
/// enumeration order.
pub fn solve_exact_piecewise(
    net: &Network,
    cfg: &DroopModeConfig,
    opts: &IpmOptions,
) -> Result<OracleOutcome, OracleError> {
    let problem = build_opf(net, cfg)?;
    let handles = problem.droop_handles();
    let segments: Vec<Vec<Segment>> = handles.iter().map(|(_, c)| c.segments()).collect();
    let sizes: Vec<usize> = segments.iter().map(Vec::len).collect();
    let combos = cartesian(&sizes)?;
    let n_total = combos.len();

    let wall = Instant::now();
    let results: Vec<(AssignmentRecord, Option<IpmSolution>)> = map_batch(&combos, |combo| {
        let mut sub = problem.clone();
        for (d, &(h, _)) in handles.iter().enumerate() {
            sub.set_segment(h, Some(segments[d][combo[d]]));
        }
        let assignment = describe_assignment(&sub, &handles, &segments, combo);
        let t = Instant::now();
        let solved = solve_ipm(&sub, opts);
        let solve_time_s = t.elapsed().as_secs_f64();
        match solved {
            Ok(sol) => {
                let feasible = handles.iter().enumerate().all(|(d, &(h, _))| {
                    let v = sub.driver_value(&sol.x, h);
                    let seg = segments[d][combo[d]];
                    v >= seg.v_lo - INTERVAL_TOL && v <= seg.v_hi + INTERVAL_TOL
                });
                let status = if feasible { "optimal" } else { "infeasible" };
                let record = AssignmentRecord {
                    assignment,
                    status: status.to_string(),
                    objective: Some(sol.objective),
                    solve_time_s,
                };
                (record, feasible.then_some(sol))
            }
            Err(err) => (
                AssignmentRecord {
                    assignment,
                    status: format!("infeasible ({err})"),
                    objective: None,
                    solve_time_s,
                },
                None,
            ),
        }
    });
    let wall_time_s = wall.elapsed().as_secs_f64();

    let mut records = Vec::with_capacity(results.len());
    let mut best: Option<(usize, IpmSolution)> = None;
    for (i, (record, sol)) in results.into_iter().enumerate() {
        if let Some(sol) = sol {
            let better = match &best {
                None => true,
                // first-in-order wins ties: strict improvement required
                Some((_, b)) => sol.objective < b.objective - 1e-6,
            };
            if better {
                best = Some((i, sol));
            }
        }
        records.push(record);
    }
    let total_time_s = records.iter().map(|r| r.solve_time_s).sum();
    match best {
        None => Err(OracleError::AllInfeasible(n_total)),
        Some((i, sol)) => Ok(OracleOutcome {
            best_assignment: records[i].assignment.clone(),
            objective: sol.objective,
            best: sol,
            records,
            total_time_s,
            wall_time_s,
        }),
    }
}
