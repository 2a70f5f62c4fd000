//! AC and DC steady-state physics: admittance construction, polar power
//! injections, branch flows, and their analytic partial derivatives.
//!
//! Everything is dense; target systems are small enough that factorization
//! cost is dominated by curve evaluation and the outer solver loops.

use nalgebra::DMatrix;

use crate::network::Network;

/// Dense complex bus admittance matrix, split into real and imaginary parts.
#[derive(Debug, Clone)]
pub struct YBus {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Series admittance terms of one branch in the two-port model
/// `[y_ff y_ft; y_tf y_tt]`, with an off-nominal tap on the from side.
#[derive(Debug, Clone, Copy)]
pub struct BranchAdmittance {
    pub g_ff: f64,
    pub b_ff: f64,
    pub g_ft: f64,
    pub b_ft: f64,
    pub g_tf: f64,
    pub b_tf: f64,
    pub g_tt: f64,
    pub b_tt: f64,
}

pub fn branch_admittance(resistance: f64, reactance: f64, tap: Option<f64>) -> BranchAdmittance {
    let z2 = resistance * resistance + reactance * reactance;
    let (g, b) = (resistance / z2, -reactance / z2);
    let t = tap.unwrap_or(1.0);
    BranchAdmittance {
        g_ff: g / (t * t),
        b_ff: b / (t * t),
        g_ft: -g / t,
        b_ft: -b / t,
        g_tf: -g / t,
        b_tf: -b / t,
        g_tt: g,
        b_tt: b,
    }
}

/// Assemble the AC bus admittance matrix over all in-service branches.
pub fn build_ybus(net: &Network) -> YBus {
    let index = net.bus_index();
    let n = net.buses.len();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for br in &net.ac_branches {
        let f = index[br.from_id.as_str()];
        let t = index[br.to_id.as_str()];
        let y = branch_admittance(br.resistance, br.reactance, br.tap);
        g[(f, f)] += y.g_ff;
        b[(f, f)] += y.b_ff;
        g[(f, t)] += y.g_ft;
        b[(f, t)] += y.b_ft;
        g[(t, f)] += y.g_tf;
        b[(t, f)] += y.b_tf;
        g[(t, t)] += y.g_tt;
        b[(t, t)] += y.b_tt;
    }
    YBus { g, b }
}

/// Net complex power injected into the network at every bus, polar form.
pub fn ac_injections(y: &YBus, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = vm.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            if gij == 0.0 && bij == 0.0 {
                continue;
            }
            let th = va[i] - va[j];
            let (s, c) = th.sin_cos();
            p[i] += vm[i] * vm[j] * (gij * c + bij * s);
            q[i] += vm[i] * vm[j] * (gij * s - bij * c);
        }
    }
    (p, q)
}

/// Jacobian blocks of [`ac_injections`] with respect to angles and magnitudes.
#[derive(Debug, Clone)]
pub struct AcPartials {
    pub dp_dva: DMatrix<f64>,
    pub dp_dvm: DMatrix<f64>,
    pub dq_dva: DMatrix<f64>,
    pub dq_dvm: DMatrix<f64>,
}

pub fn ac_injection_partials(y: &YBus, vm: &[f64], va: &[f64]) -> AcPartials {
    let n = vm.len();
    let (p, q) = ac_injections(y, vm, va);
    let mut dp_dva = DMatrix::zeros(n, n);
    let mut dp_dvm = DMatrix::zeros(n, n);
    let mut dq_dva = DMatrix::zeros(n, n);
    let mut dq_dvm = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (gij, bij) = (y.g[(i, j)], y.b[(i, j)]);
            if i == j {
                dp_dva[(i, i)] = -q[i] - bij * vm[i] * vm[i];
                dp_dvm[(i, i)] = p[i] / vm[i] + gij * vm[i];
                dq_dva[(i, i)] = p[i] - gij * vm[i] * vm[i];
                dq_dvm[(i, i)] = q[i] / vm[i] - bij * vm[i];
            } else {
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                let th = va[i] - va[j];
                let (s, c) = th.sin_cos();
                dp_dva[(i, j)] = vm[i] * vm[j] * (gij * s - bij * c);
                dp_dvm[(i, j)] = vm[i] * (gij * c + bij * s);
                dq_dva[(i, j)] = -vm[i] * vm[j] * (gij * c + bij * s);
                dq_dvm[(i, j)] = vm[i] * (gij * s - bij * c);
            }
        }
    }
    AcPartials {
        dp_dva,
        dp_dvm,
        dq_dva,
        dq_dvm,
    }
}

/// Complex power entering a branch at each end.
#[derive(Debug, Clone, Copy)]
pub struct BranchFlow {
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
}

pub fn branch_flow(
    y: &BranchAdmittance,
    vm_f: f64,
    va_f: f64,
    vm_t: f64,
    va_t: f64,
) -> BranchFlow {
    let th = va_f - va_t;
    let (s, c) = th.sin_cos();
    BranchFlow {
        p_from: vm_f * vm_f * y.g_ff + vm_f * vm_t * (y.g_ft * c + y.b_ft * s),
        q_from: -vm_f * vm_f * y.b_ff + vm_f * vm_t * (y.g_ft * s - y.b_ft * c),
        p_to: vm_t * vm_t * y.g_tt + vm_f * vm_t * (y.g_tf * c - y.b_tf * s),
        q_to: -vm_t * vm_t * y.b_tt - vm_f * vm_t * (y.g_tf * s + y.b_tf * c),
    }
}

/// Partials of [`branch_flow`], each row ordered `(va_f, va_t, vm_f, vm_t)`.
#[derive(Debug, Clone, Copy)]
pub struct BranchFlowPartials {
    pub p_from: [f64; 4],
    pub q_from: [f64; 4],
    pub p_to: [f64; 4],
    pub q_to: [f64; 4],
}

pub fn branch_flow_partials(
    y: &BranchAdmittance,
    vm_f: f64,
    va_f: f64,
    vm_t: f64,
    va_t: f64,
) -> BranchFlowPartials {
    let th = va_f - va_t;
    let (s, c) = th.sin_cos();
    let pf_th = vm_f * vm_t * (-y.g_ft * s + y.b_ft * c);
    let qf_th = vm_f * vm_t * (y.g_ft * c + y.b_ft * s);
    let pt_th = vm_f * vm_t * (-y.g_tf * s - y.b_tf * c);
    let qt_th = vm_f * vm_t * (-y.g_tf * c + y.b_tf * s);
    BranchFlowPartials {
        p_from: [
            pf_th,
            -pf_th,
            2.0 * vm_f * y.g_ff + vm_t * (y.g_ft * c + y.b_ft * s),
            vm_f * (y.g_ft * c + y.b_ft * s),
        ],
        q_from: [
            qf_th,
            -qf_th,
            -2.0 * vm_f * y.b_ff + vm_t * (y.g_ft * s - y.b_ft * c),
            vm_f * (y.g_ft * s - y.b_ft * c),
        ],
        p_to: [
            pt_th,
            -pt_th,
            vm_t * (y.g_tf * c - y.b_tf * s),
            2.0 * vm_t * y.g_tt + vm_f * (y.g_tf * c - y.b_tf * s),
        ],
        q_to: [
            qt_th,
            -qt_th,
            -vm_t * (y.g_tf * s + y.b_tf * c),
            -2.0 * vm_t * y.b_tt - vm_f * (y.g_tf * s + y.b_tf * c),
        ],
    }
}

/// DC network conductance Laplacian over the dc buses.
pub fn build_dc_conductance(net: &Network) -> DMatrix<f64> {
    let index = net.dc_bus_index();
    let n = net.dc_buses.len();
    let mut g = DMatrix::zeros(n, n);
    for br in &net.dc_branches {
        let f = index[br.from_id.as_str()];
        let t = index[br.to_id.as_str()];
        let y = 1.0 / br.resistance;
        g[(f, f)] += y;
        g[(t, t)] += y;
        g[(f, t)] -= y;
        g[(t, f)] -= y;
    }
    g
}

/// Power flowing out of each dc bus into the dc network: `p_i = V_i (G V)_i`.
pub fn dc_injections(g: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| v[i] * (0..n).map(|j| g[(i, j)] * v[j]).sum::<f64>())
        .collect()
}

/// `d p_i / d V_j` of [`dc_injections`].
pub fn dc_injection_partials(g: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let gv: f64 = (0..n).map(|j| g[(i, j)] * v[j]).sum();
        for j in 0..n {
            jac[(i, j)] = v[i] * g[(i, j)] + if i == j { gv } else { 0.0 };
        }
    }
    jac
}

/// Power flowing into a dc branch at the from side.
#[inline]
pub fn dc_branch_flow(resistance: f64, v_f: f64, v_t: f64) -> f64 {
    v_f * (v_f - v_t) / resistance
}

/// Smoothed apparent power magnitude `sqrt(p^2 + q^2 + sigma)` and its
/// partials; the floor keeps the converter loss model differentiable at the
/// origin.
pub const S_MAG_FLOOR: f64 = 1e-12;

#[inline]
pub fn s_mag_smooth(p: f64, q: f64) -> f64 {
    (p * p + q * q + S_MAG_FLOOR).sqrt()
}

#[inline]
pub fn s_mag_smooth_grad(p: f64, q: f64) -> (f64, f64) {
    let s = s_mag_smooth(p, q);
    (p / s, q / s)
}
