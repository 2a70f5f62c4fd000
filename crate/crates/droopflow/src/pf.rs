//! AC-DC power flow: residual construction and a damped Newton solver.
//!
//! The unknowns are bus voltage angles (non-slack), magnitudes (PQ buses),
//! dc bus voltages, and per-converter ac/dc powers. Converter droop enters as
//! one smooth equality per converter, so the residual stays C-infinity and a
//! plain Newton iteration with backtracking applies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acdc::{
    ac_injection_partials, ac_injections, build_dc_conductance, build_ybus, dc_injection_partials,
    dc_injections, s_mag_smooth, s_mag_smooth_grad, YBus,
};
use crate::curves::{
    pvdc_deadband_smooth_deriv_raw, pvdc_deadband_smooth_raw, pvdc_linear_smooth_deriv_raw,
    pvdc_linear_smooth_raw, qvac_smooth_deriv_raw, qvac_smooth_raw, CurveError,
};
use crate::network::{BusKind, Network};
use crate::smooth::SmoothingConfig;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("jacobian is singular at iteration {0}")]
    Singular(usize),
    #[error("line search stalled at iteration {iter} (step {step:.3e}, mismatch {mismatch:.3e})")]
    NoProgress {
        iter: usize,
        step: f64,
        mismatch: f64,
    },
    #[error("no convergence after {iters} iterations (mismatch {mismatch:.3e})")]
    MaxIterations { iters: usize, mismatch: f64 },
}

/// Which converter P-Vdc characteristic the droop rows use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DroopMode {
    /// Constant power: `P_dc = p_dc_set`.
    None,
    /// Smooth linear droop for converters that define one.
    Linear,
    /// Smooth deadband droop for converters that define one.
    Deadband,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfOptions {
    pub mode: DroopMode,
    /// Replace the constant converter reactive setpoint by the Q-Vac curve
    /// where one is defined.
    pub use_qvac: bool,
    pub smoothing: SmoothingConfig,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            mode: DroopMode::None,
            use_qvac: false,
            smoothing: SmoothingConfig::default(),
            tol: 1e-8,
            max_iter: 40,
        }
    }
}

const MIN_STEP: f64 = 1.0 / (1u64 << 20) as f64;

/// Assembled power flow system over a pruned network snapshot.
pub struct PfModel {
    net: Network,
    opts: PfOptions,
    eps: f64,
    ybus: YBus,
    gdc: DMatrix<f64>,
    /// x-index of each bus angle (None for slack).
    va_idx: Vec<Option<usize>>,
    /// x-index of each bus magnitude (None for slack and PV).
    vm_idx: Vec<Option<usize>>,
    vdc_off: usize,
    pac_off: usize,
    pdc_off: usize,
    dim: usize,
    /// residual row of the P balance per bus (None for slack)
    p_row: Vec<Option<usize>>,
    /// residual row of the Q balance per bus (None unless PQ)
    q_row: Vec<Option<usize>>,
    dc_row_off: usize,
    couple_row_off: usize,
    droop_row_off: usize,
    /// per-converter (ac bus index, dc bus index)
    conv_buses: Vec<(usize, usize)>,
    /// dc-slack anchor voltage per converter: the droop row becomes
    /// `V_dc = v` for islands where no converter contributes an active curve
    anchor: Vec<Option<f64>>,
    /// net generator dispatch minus load at each bus
    p_fixed: Vec<f64>,
    q_fixed: Vec<f64>,
}

/// Remove islanded buses and everything attached to them.
pub(crate) fn prune(net: &Network) -> Network {
    let dead: std::collections::HashSet<&str> = net
        .buses
        .iter()
        .filter(|b| b.islanded)
        .map(|b| b.id.as_str())
        .chain(net.dc_buses.iter().filter(|b| b.islanded).map(|b| b.id.as_str()))
        .collect();
    if dead.is_empty() {
        return net.clone();
    }
    let mut out = net.clone();
    out.buses.retain(|b| !b.islanded);
    out.dc_buses.retain(|b| !b.islanded);
    out.generators.retain(|g| !dead.contains(g.bus_id.as_str()));
    out.ac_branches
        .retain(|b| !dead.contains(b.from_id.as_str()) && !dead.contains(b.to_id.as_str()));
    out.dc_branches
        .retain(|b| !dead.contains(b.from_id.as_str()) && !dead.contains(b.to_id.as_str()));
    out.converters
        .retain(|c| !dead.contains(c.ac_bus_id.as_str()) && !dead.contains(c.dc_bus_id.as_str()));
    out
}

/// Build the square residual system for `net` under `opts`.
pub fn build_pf_residuals(net: &Network, opts: &PfOptions) -> Result<PfModel, PfError> {
    opts.smoothing
        .validate()
        .map_err(|e| PfError::Model(e.to_string()))?;
    let net = prune(net);

    // every dc island needs at least one converter to carry power in or out,
    // unless it is entirely passive (no load either)
    for island in net.dc_islands() {
        let has_conv = island
            .iter()
            .any(|&d| net.converters.iter().any(|c| c.dc_bus_id == net.dc_buses[d].id));
        let has_load = island.iter().any(|&d| net.dc_buses[d].load_p != 0.0);
        if !has_conv && has_load {
            return Err(PfError::Model(format!(
                "dc island containing {} has load but no converter",
                net.dc_buses[island[0]].id
            )));
        }
    }

    let bus_index = net.bus_index();
    let dc_index = net.dc_bus_index();
    let n_bus = net.buses.len();

    let mut va_idx = vec![None; n_bus];
    let mut vm_idx = vec![None; n_bus];
    let mut p_row = vec![None; n_bus];
    let mut q_row = vec![None; n_bus];
    let mut nx = 0;
    let mut nr = 0;
    for (i, bus) in net.buses.iter().enumerate() {
        if bus.kind != BusKind::Slack {
            va_idx[i] = Some(nx);
            nx += 1;
            p_row[i] = Some(nr);
            nr += 1;
        }
    }
    for (i, bus) in net.buses.iter().enumerate() {
        if bus.kind == BusKind::Pq {
            vm_idx[i] = Some(nx);
            nx += 1;
            q_row[i] = Some(nr);
            nr += 1;
        }
    }
    let vdc_off = nx;
    nx += net.dc_buses.len();
    let dc_row_off = nr;
    nr += net.dc_buses.len();
    let pac_off = nx;
    nx += net.converters.len();
    let couple_row_off = nr;
    nr += net.converters.len();
    let pdc_off = nx;
    nx += net.converters.len();
    let droop_row_off = nr;
    nr += net.converters.len();
    debug_assert_eq!(nx, nr);

    let conv_buses: Vec<(usize, usize)> = net
        .converters
        .iter()
        .map(|c| {
            (
                bus_index[c.ac_bus_id.as_str()],
                dc_index[c.dc_bus_id.as_str()],
            )
        })
        .collect();

    // Constant-power converters alone cannot fix the dc voltage level (the
    // balance equations only see voltage differences to first order), so any
    // dc island whose converters all run constant power gets one dc-slack
    // anchor: its droop row pins the local dc voltage instead.
    let mut anchor = vec![None; net.converters.len()];
    for island in net.dc_islands() {
        let members: Vec<usize> = (0..net.converters.len())
            .filter(|&c| island.contains(&conv_buses[c].1))
            .collect();
        let any_curve = members.iter().any(|&c| match opts.mode {
            DroopMode::Linear => net.converters[c].pvdc_linear.is_some(),
            DroopMode::Deadband => net.converters[c].pvdc_deadband.is_some(),
            DroopMode::None => false,
        });
        if !any_curve {
            if let Some(&c) = members.first() {
                let v = net.converters[c]
                    .pvdc_linear
                    .as_ref()
                    .map(|s| s.v_ref)
                    .unwrap_or(1.0);
                anchor[c] = Some(v);
            }
        }
    }

    let mut p_fixed = vec![0.0; n_bus];
    let mut q_fixed = vec![0.0; n_bus];
    for (i, bus) in net.buses.iter().enumerate() {
        p_fixed[i] -= bus.load_p;
        q_fixed[i] -= bus.load_q;
    }
    for g in &net.generators {
        let i = bus_index[g.bus_id.as_str()];
        // non-slack generators hold their dispatch; PQ-bus units also hold a
        // zero reactive setpoint
        if net.buses[i].kind != BusKind::Slack {
            p_fixed[i] += g.p_response.p_base;
        }
    }

    let ybus = build_ybus(&net);
    let gdc = build_dc_conductance(&net);

    Ok(PfModel {
        eps: opts.smoothing.epsilon,
        opts: opts.clone(),
        ybus,
        gdc,
        va_idx,
        vm_idx,
        vdc_off,
        pac_off,
        pdc_off,
        dim: nx,
        p_row,
        q_row,
        dc_row_off,
        couple_row_off,
        droop_row_off,
        conv_buses,
        anchor,
        p_fixed,
        q_fixed,
        net,
    })
}

impl PfModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn set_epsilon(&mut self, eps: f64) {
        self.eps = eps;
    }

    /// Flat start: nominal magnitudes, zero angles, setpoint powers.
    pub fn flat_start(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim);
        for i in 0..self.net.buses.len() {
            if let Some(k) = self.vm_idx[i] {
                x[k] = 1.0;
            }
        }
        for d in 0..self.net.dc_buses.len() {
            x[self.vdc_off + d] = 1.0;
        }
        for (c, conv) in self.net.converters.iter().enumerate() {
            x[self.pac_off + c] = -conv.p_dc_set;
            x[self.pdc_off + c] = conv.p_dc_set;
        }
        x
    }

    fn voltages(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let mut vm = Vec::with_capacity(self.net.buses.len());
        let mut va = Vec::with_capacity(self.net.buses.len());
        for (i, bus) in self.net.buses.iter().enumerate() {
            vm.push(match self.vm_idx[i] {
                Some(k) => x[k],
                None => bus.v_set,
            });
            va.push(match self.va_idx[i] {
                Some(k) => x[k],
                None => 0.0,
            });
        }
        (vm, va)
    }

    /// Converter reactive injection into the ac bus, and its derivative with
    /// respect to the local voltage magnitude.
    fn conv_q(&self, c: usize, vm_ac: f64) -> (f64, f64) {
        let conv = &self.net.converters[c];
        if self.opts.use_qvac {
            if let Some(spec) = &conv.qvac {
                return (
                    qvac_smooth_raw(spec, vm_ac, self.eps),
                    qvac_smooth_deriv_raw(spec, vm_ac, self.eps),
                );
            }
        }
        (conv.q_ac_set, 0.0)
    }

    /// Droop curve value and dV-derivative for converter `c` under the active
    /// mode; converters without the requested curve fall back to constant
    /// power.
    fn droop_curve(&self, c: usize, v_dc: f64) -> (f64, f64) {
        let conv = &self.net.converters[c];
        match self.opts.mode {
            DroopMode::Linear => {
                if let Some(spec) = &conv.pvdc_linear {
                    return (
                        pvdc_linear_smooth_raw(spec, v_dc, self.eps),
                        pvdc_linear_smooth_deriv_raw(spec, v_dc, self.eps),
                    );
                }
            }
            DroopMode::Deadband => {
                if let Some(spec) = &conv.pvdc_deadband {
                    return (
                        pvdc_deadband_smooth_raw(spec, v_dc, self.eps),
                        pvdc_deadband_smooth_deriv_raw(spec, v_dc, self.eps),
                    );
                }
            }
            DroopMode::None => {}
        }
        (conv.p_dc_set, 0.0)
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let (vm, va) = self.voltages(x);
        let (p_calc, q_calc) = ac_injections(&self.ybus, &vm, &va);
        let v_dc: Vec<f64> = (0..self.net.dc_buses.len())
            .map(|d| x[self.vdc_off + d])
            .collect();
        let p_dc_flow = dc_injections(&self.gdc, &v_dc);

        let mut r = DVector::zeros(self.dim);
        for i in 0..self.net.buses.len() {
            if let Some(row) = self.p_row[i] {
                r[row] = p_calc[i] - self.p_fixed[i];
            }
            if let Some(row) = self.q_row[i] {
                r[row] = q_calc[i] - self.q_fixed[i];
            }
        }
        for (c, &(ab, db)) in self.conv_buses.iter().enumerate() {
            let p_ac = x[self.pac_off + c];
            let p_dc = x[self.pdc_off + c];
            if let Some(row) = self.p_row[ab] {
                r[row] -= p_ac;
            }
            let (q_ac, _) = self.conv_q(c, vm[ab]);
            if let Some(row) = self.q_row[ab] {
                r[row] -= q_ac;
            }
            // dc bus balance: converter injections feed the dc network
            r[self.dc_row_off + db] -= p_dc;
            // coupling: both-side injections plus conversion loss sum to zero
            let conv = &self.net.converters[c];
            let loss =
                conv.loss_a + conv.loss_b * s_mag_smooth(p_ac, q_ac) / conv.s_max;
            r[self.couple_row_off + c] = p_ac + p_dc + loss;
            r[self.droop_row_off + c] = match self.anchor[c] {
                Some(v_set) => x[self.vdc_off + db] - v_set,
                None => {
                    let (f, _) = self.droop_curve(c, x[self.vdc_off + db]);
                    p_dc - f
                }
            };
        }
        for d in 0..self.net.dc_buses.len() {
            r[self.dc_row_off + d] += p_dc_flow[d] + self.net.dc_buses[d].load_p;
        }
        r
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (vm, va) = self.voltages(x);
        let parts = ac_injection_partials(&self.ybus, &vm, &va);
        let v_dc: Vec<f64> = (0..self.net.dc_buses.len())
            .map(|d| x[self.vdc_off + d])
            .collect();
        let dc_parts = dc_injection_partials(&self.gdc, &v_dc);

        let n_bus = self.net.buses.len();
        let mut jac = DMatrix::zeros(self.dim, self.dim);
        for i in 0..n_bus {
            for j in 0..n_bus {
                if let Some(row) = self.p_row[i] {
                    if let Some(col) = self.va_idx[j] {
                        jac[(row, col)] = parts.dp_dva[(i, j)];
                    }
                    if let Some(col) = self.vm_idx[j] {
                        jac[(row, col)] = parts.dp_dvm[(i, j)];
                    }
                }
                if let Some(row) = self.q_row[i] {
                    if let Some(col) = self.va_idx[j] {
                        jac[(row, col)] = parts.dq_dva[(i, j)];
                    }
                    if let Some(col) = self.vm_idx[j] {
                        jac[(row, col)] = parts.dq_dvm[(i, j)];
                    }
                }
            }
        }
        for d in 0..self.net.dc_buses.len() {
            for e in 0..self.net.dc_buses.len() {
                jac[(self.dc_row_off + d, self.vdc_off + e)] = dc_parts[(d, e)];
            }
        }
        for (c, &(ab, db)) in self.conv_buses.iter().enumerate() {
            let conv = &self.net.converters[c];
            let p_ac = x[self.pac_off + c];
            let (q_ac, dq_dvm) = self.conv_q(c, vm[ab]);
            if let Some(row) = self.p_row[ab] {
                jac[(row, self.pac_off + c)] = -1.0;
            }
            if let Some(row) = self.q_row[ab] {
                if let Some(col) = self.vm_idx[ab] {
                    jac[(row, col)] -= dq_dvm;
                }
            }
            jac[(self.dc_row_off + db, self.pdc_off + c)] = -1.0;

            let (ds_dp, ds_dq) = s_mag_smooth_grad(p_ac, q_ac);
            let lb = conv.loss_b / conv.s_max;
            let crow = self.couple_row_off + c;
            jac[(crow, self.pac_off + c)] = 1.0 + lb * ds_dp;
            jac[(crow, self.pdc_off + c)] = 1.0;
            if let Some(col) = self.vm_idx[ab] {
                jac[(crow, col)] += lb * ds_dq * dq_dvm;
            }

            let drow = self.droop_row_off + c;
            if self.anchor[c].is_some() {
                jac[(drow, self.vdc_off + db)] = 1.0;
            } else {
                let (_, df_dv) = self.droop_curve(c, x[self.vdc_off + db]);
                jac[(drow, self.pdc_off + c)] = 1.0;
                jac[(drow, self.vdc_off + db)] = -df_dv;
            }
        }
        jac
    }

    /// Human-readable label of every residual row, aligned with
    /// [`Self::residual`].
    pub fn labels(&self) -> Vec<String> {
        let mut labels = vec![String::new(); self.dim];
        for (i, bus) in self.net.buses.iter().enumerate() {
            if let Some(row) = self.p_row[i] {
                labels[row] = format!("P@{}", bus.id);
            }
            if let Some(row) = self.q_row[i] {
                labels[row] = format!("Q@{}", bus.id);
            }
        }
        for (d, bus) in self.net.dc_buses.iter().enumerate() {
            labels[self.dc_row_off + d] = format!("Pdc@{}", bus.id);
        }
        for (c, conv) in self.net.converters.iter().enumerate() {
            labels[self.couple_row_off + c] = format!("couple@{}", conv.id);
            labels[self.droop_row_off + c] = format!("droop@{}", conv.id);
        }
        labels
    }

    fn extract(&self, x: &DVector<f64>, iterations: usize) -> PfSolution {
        let (vm, va) = self.voltages(x);
        let (p_calc, q_calc) = ac_injections(&self.ybus, &vm, &va);
        let mut conv_p_ac = vec![0.0; self.net.buses.len()];
        let mut conv_q_ac = vec![0.0; self.net.buses.len()];
        let mut converters = Vec::new();
        for (c, &(ab, db)) in self.conv_buses.iter().enumerate() {
            let conv = &self.net.converters[c];
            let p_ac = x[self.pac_off + c];
            let p_dc = x[self.pdc_off + c];
            let (q_ac, _) = self.conv_q(c, vm[ab]);
            conv_p_ac[ab] += p_ac;
            conv_q_ac[ab] += q_ac;
            converters.push(ConverterResult {
                id: conv.id.clone(),
                p_ac,
                q_ac,
                p_dc,
                v_dc: x[self.vdc_off + db],
                loss: conv.loss_a + conv.loss_b * s_mag_smooth(p_ac, q_ac) / conv.s_max,
            });
        }

        let bus_index = self.net.bus_index();
        let mut generators = Vec::new();
        for (i, bus) in self.net.buses.iter().enumerate() {
            let gens: Vec<&crate::network::Generator> =
                self.net.generators.iter().filter(|g| g.bus_id == bus.id).collect();
            if gens.is_empty() {
                continue;
            }
            let share = 1.0 / gens.len() as f64;
            let p_total = p_calc[i] + bus.load_p - conv_p_ac[i];
            let q_total = q_calc[i] + bus.load_q - conv_q_ac[i];
            for g in gens {
                let p = match bus.kind {
                    BusKind::Slack => p_total * share,
                    _ => g.p_response.p_base,
                };
                let q = match bus.kind {
                    BusKind::Pq => 0.0,
                    _ => q_total * share,
                };
                generators.push(GeneratorResult {
                    id: g.id.clone(),
                    p,
                    q,
                });
            }
        }
        let _ = bus_index;

        let r = self.residual(x);
        PfSolution {
            buses: self
                .net
                .buses
                .iter()
                .enumerate()
                .map(|(i, b)| BusResult {
                    id: b.id.clone(),
                    vm: vm[i],
                    va: va[i],
                })
                .collect(),
            dc_buses: self
                .net
                .dc_buses
                .iter()
                .enumerate()
                .map(|(d, b)| DcBusResult {
                    id: b.id.clone(),
                    v: x[self.vdc_off + d],
                })
                .collect(),
            converters,
            generators,
            iterations,
            mismatch: r.amax(),
            epsilon: self.eps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusResult {
    pub id: String,
    pub vm: f64,
    pub va: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DcBusResult {
    pub id: String,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConverterResult {
    pub id: String,
    pub p_ac: f64,
    pub q_ac: f64,
    pub p_dc: f64,
    pub v_dc: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorResult {
    pub id: String,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfSolution {
    pub buses: Vec<BusResult>,
    pub dc_buses: Vec<DcBusResult>,
    pub converters: Vec<ConverterResult>,
    pub generators: Vec<GeneratorResult>,
    pub iterations: usize,
    pub mismatch: f64,
    pub epsilon: f64,
}

impl PfSolution {
    pub fn bus(&self, id: &str) -> Option<&BusResult> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn dc_bus(&self, id: &str) -> Option<&DcBusResult> {
        self.dc_buses.iter().find(|b| b.id == id)
    }

    pub fn converter(&self, id: &str) -> Option<&ConverterResult> {
        self.converters.iter().find(|c| c.id == id)
    }

    pub fn generator(&self, id: &str) -> Option<&GeneratorResult> {
        self.generators.iter().find(|g| g.id == id)
    }
}

/// One row of a mismatch report: labeled residual magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MismatchEntry {
    pub label: String,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MismatchReport {
    pub entries: Vec<MismatchEntry>,
    pub max_abs: f64,
}

/// Evaluate per-equation residuals at a state, sorted by decreasing
/// magnitude.
pub fn mismatch_report(model: &PfModel, x: &DVector<f64>) -> MismatchReport {
    let r = model.residual(x);
    let labels = model.labels();
    let mut entries: Vec<MismatchEntry> = labels
        .into_iter()
        .zip(r.iter())
        .map(|(label, &residual)| MismatchEntry { label, residual })
        .collect();
    entries.sort_by(|a, b| b.residual.abs().total_cmp(&a.residual.abs()));
    MismatchReport {
        max_abs: r.amax(),
        entries,
    }
}

/// Damped Newton with epsilon continuation: the smooth system is solved at
/// each sharpness in the anneal schedule, warm-starting the next stage, and
/// finally at the target epsilon. Iteration counts accumulate across stages.
pub fn solve_newton(net: &Network, opts: &PfOptions) -> Result<PfSolution, PfError> {
    let mut model = build_pf_residuals(net, opts)?;
    let mut x = model.flat_start();
    let mut total_iters = 0;

    let stages: Vec<f64> = if opts.mode == DroopMode::None {
        vec![opts.smoothing.epsilon]
    } else {
        continuation_stages(&opts.smoothing)
    };

    for (k, &eps) in stages.iter().enumerate() {
        model.set_epsilon(eps);
        // intermediate stages only guide the warm start; solve them loosely
        let tol = if k + 1 == stages.len() {
            opts.tol
        } else {
            opts.tol.max(1e-4)
        };
        total_iters = newton_stage(&model, &mut x, opts, tol, total_iters)?;
    }
    Ok(model.extract(&x, total_iters))
}

/// Decreasing epsilon sequence ending at the target sharpness. Consecutive
/// values keep a bounded ratio: a large jump would strand the warm start in a
/// region where the sharper deadband curve is numerically flat.
pub(crate) fn continuation_stages(smoothing: &SmoothingConfig) -> Vec<f64> {
    const MAX_RATIO: f64 = 2.5;
    let target = smoothing.epsilon;
    let start = smoothing
        .anneal_schedule
        .iter()
        .copied()
        .fold(target, f64::max);
    let mut stages = vec![start];
    let mut eps = start;
    while eps > target * MAX_RATIO {
        eps /= MAX_RATIO;
        stages.push(eps);
    }
    if *stages.last().unwrap() != target {
        stages.push(target);
    }
    stages
}

fn newton_stage(
    model: &PfModel,
    x: &mut DVector<f64>,
    opts: &PfOptions,
    tol: f64,
    mut iters: usize,
) -> Result<usize, PfError> {
    let mut r = model.residual(x);
    let mut norm = r.amax();
    let mut lambda = 0.0;
    while norm > tol {
        if iters >= opts.max_iter {
            return Err(PfError::MaxIterations {
                iters,
                mismatch: norm,
            });
        }
        let jac = model.jacobian(x);
        let scale = jac.amax().max(1.0);
        // near-flat droop segments can make the step direction almost
        // singular; escalate a diagonal regularization until a step that
        // decreases the mismatch exists
        let mut accepted = false;
        for _attempt in 0..12 {
            let mut jreg = jac.clone();
            if lambda > 0.0 {
                for i in 0..model.dim() {
                    jreg[(i, i)] += lambda * scale;
                }
            }
            let Some(dx) = jreg.lu().solve(&-&r) else {
                lambda = (lambda * 10.0).max(1e-10);
                continue;
            };
            // backtracking on the infinity norm, halving until it decreases
            let mut step = 1.0;
            while step >= MIN_STEP {
                let trial = &*x + step * &dx;
                let r_trial = model.residual(&trial);
                let n_trial = r_trial.amax();
                if n_trial < norm || n_trial <= tol {
                    *x = trial;
                    r = r_trial;
                    norm = n_trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                lambda = if step == 1.0 { lambda * 0.1 } else { lambda };
                if lambda < 1e-12 {
                    lambda = 0.0;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-10);
        }
        if !accepted {
            return Err(PfError::NoProgress {
                iter: iters,
                step: MIN_STEP,
                mismatch: norm,
            });
        }
        iters += 1;
        log::debug!("newton iter {iters}: mismatch {norm:.3e} lambda {lambda:.1e}");
    }
    Ok(iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn load(name: &str) -> Network {
        let path = format!("{}/cases/{}", env!("CARGO_MANIFEST_DIR"), name);
        Network::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    fn opts(mode: DroopMode) -> PfOptions {
        PfOptions {
            mode,
            ..PfOptions::default()
        }
    }

    #[test]
    fn jacobian_matches_finite_differences_all_modes() {
        let net = load("case5_acdc.json");
        for mode in [DroopMode::None, DroopMode::Linear, DroopMode::Deadband] {
            for use_qvac in [false, true] {
                let o = PfOptions {
                    mode,
                    use_qvac,
                    ..PfOptions::default()
                };
                let model = build_pf_residuals(&net, &o).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(42);
                let mut x = model.flat_start();
                for v in x.iter_mut() {
                    *v += rng.gen_range(-0.02..0.02);
                }
                let jac = model.jacobian(&x);
                let h = 1e-7;
                for j in 0..model.dim() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let (rp, rm) = (model.residual(&xp), model.residual(&xm));
                    for i in 0..model.dim() {
                        let fd = (rp[i] - rm[i]) / (2.0 * h);
                        assert!(
                            (jac[(i, j)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                            "mode {mode:?} qvac {use_qvac} J[{i},{j}] = {} vs fd {fd}",
                            jac[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn two_bus_case_matches_gauss_seidel_oracle() {
        let net = load("case2_min.json");
        let sol = solve_newton(&net, &opts(DroopMode::None)).unwrap();
        assert!(sol.mismatch <= 1e-8);

        // independent complex-arithmetic Gauss-Seidel on the 2-bus system
        let (r, x) = (0.01, 0.05);
        let z2 = r * r + x * x;
        let (g, b) = (r / z2, -x / z2);
        // V2 iteration: V2 = (S2* / V2* - Y21 V1) / Y22, Y21 = -(g + jb)
        let (sp, sq) = (-0.5, -0.1);
        let (mut v2r, mut v2i) = (1.0f64, 0.0f64);
        for _ in 0..200 {
            let denom = v2r * v2r + v2i * v2i;
            // S2*/V2*
            let (ar, ai) = (
                (sp * v2r + sq * v2i) / denom,
                (sp * v2i - sq * v2r) / denom,
            );
            // - Y21 * V1 with V1 = 1.0
            let (br_, bi_) = (g, b);
            let (nr_, ni_) = (ar + br_, ai + bi_);
            // divide by Y22 = g + jb
            let y2 = g * g + b * b;
            v2r = (nr_ * g + ni_ * b) / y2;
            v2i = (ni_ * g - nr_ * b) / y2;
        }
        let vm2 = (v2r * v2r + v2i * v2i).sqrt();
        let va2 = v2i.atan2(v2r);
        let bus = sol.bus("b2").unwrap();
        assert_relative_eq!(bus.vm, vm2, epsilon = 1e-8);
        assert_relative_eq!(bus.va, va2, epsilon = 1e-8);
        // the slack covers load plus losses
        let g1 = sol.generator("g1").unwrap();
        assert!(g1.p > 0.5);
        assert!(g1.p < 0.52);
    }

    #[test]
    fn acdc_case_converges_fast_in_all_modes() {
        let net = load("case5_acdc.json");
        for mode in [DroopMode::None, DroopMode::Linear, DroopMode::Deadband] {
            let sol = solve_newton(&net, &opts(mode)).unwrap();
            assert!(sol.mismatch <= 1e-8, "{mode:?}: {}", sol.mismatch);
            assert!(sol.iterations <= 20, "{mode:?}: {} iters", sol.iterations);
        }
    }

    #[test]
    fn droop_rows_hold_at_solution() {
        let net = load("case5_acdc.json");
        let eps = SmoothingConfig::default().epsilon;

        let sol = solve_newton(&net, &opts(DroopMode::Linear)).unwrap();
        let c1 = sol.converter("c1").unwrap();
        let spec = net.converters[0].pvdc_linear.as_ref().unwrap();
        let f = crate::curves::pvdc_linear_smooth(spec, c1.v_dc, eps).unwrap();
        assert_relative_eq!(c1.p_dc, f, epsilon = 1e-8);
        // operating point: importing slightly less than the reference, so the
        // dc voltage sits just under the droop anchor
        assert!(c1.v_dc < spec.v_ref);
        assert!(c1.v_dc > spec.v_ref - 0.01);

        let sol = solve_newton(&net, &opts(DroopMode::Deadband)).unwrap();
        let c1 = sol.converter("c1").unwrap();
        let spec = net.converters[0].pvdc_deadband.as_ref().unwrap();
        let f = crate::curves::pvdc_deadband_smooth(spec, c1.v_dc, eps).unwrap();
        assert_relative_eq!(c1.p_dc, f, epsilon = 1e-8);
        // deadband holds the reference until the voltage leaves [db_lo, db_hi]
        assert!(c1.v_dc > spec.db_hi);
        assert!(c1.v_dc < spec.db_hi + 0.005);

        // constant-power converter c2 is pinned in every mode
        assert_relative_eq!(
            sol.converter("c2").unwrap().p_dc,
            net.converters[1].p_dc_set,
            epsilon = 1e-8
        );
    }

    #[test]
    fn converter_losses_are_absorbed() {
        let net = load("case5_acdc.json");
        let sol = solve_newton(&net, &opts(DroopMode::Linear)).unwrap();
        for c in &sol.converters {
            assert_relative_eq!(c.p_ac + c.p_dc + c.loss, 0.0, epsilon = 1e-8);
            assert!(c.loss > 0.0);
        }
        // offshore wind output transits the dc link: g3 covers converter draw
        let g3 = sol.generator("g3").unwrap();
        assert!(g3.p > 0.49 && g3.p < 0.52, "g3.p = {}", g3.p);
    }

    #[test]
    fn qvac_mode_pins_reactive_to_curve() {
        let net = load("case5_acdc.json");
        let o = PfOptions {
            mode: DroopMode::Linear,
            use_qvac: true,
            ..PfOptions::default()
        };
        let sol = solve_newton(&net, &o).unwrap();
        assert!(sol.mismatch <= 1e-8);
        let c1 = sol.converter("c1").unwrap();
        let vm = sol.bus("b4").unwrap().vm;
        let spec = net.converters[0].qvac.as_ref().unwrap();
        let q = crate::curves::qvac_smooth(spec, vm, sol.epsilon).unwrap();
        assert_relative_eq!(c1.q_ac, q, epsilon = 1e-10);
    }

    #[test]
    fn contingency_states_solve() {
        let net = load("case5_acdc.json");
        for c in &net.contingencies {
            let derived = net.apply_contingency(c).unwrap();
            let sol = solve_newton(&derived, &opts(DroopMode::Linear)).unwrap();
            assert!(sol.mismatch <= 1e-8, "{}: {}", c.id, sol.mismatch);
        }
    }

    #[test]
    fn mismatch_report_is_labeled_and_sorted() {
        let net = load("case5_acdc.json");
        let o = opts(DroopMode::Linear);
        let model = build_pf_residuals(&net, &o).unwrap();
        let x = model.flat_start();
        let rep = mismatch_report(&model, &x);
        assert_eq!(rep.entries.len(), model.dim());
        assert!(rep.entries.iter().any(|e| e.label.starts_with("P@")));
        assert!(rep.entries.iter().any(|e| e.label.starts_with("droop@")));
        for w in rep.entries.windows(2) {
            assert!(w[0].residual.abs() >= w[1].residual.abs());
        }
        assert_relative_eq!(rep.max_abs, rep.entries[0].residual.abs());
    }

    #[test]
    fn dc_island_with_load_and_no_converter_is_rejected() {
        let mut net = load("case5_acdc.json");
        net.dc_buses.push(crate::network::DcBus {
            id: "d9".into(),
            v_min: 0.9,
            v_max: 1.1,
            load_p: 0.1,
            islanded: false,
        });
        assert!(matches!(
            build_pf_residuals(&net, &opts(DroopMode::None)),
            Err(PfError::Model(_))
        ));
    }
}
