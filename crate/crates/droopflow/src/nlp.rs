//! Generic smooth NLP solver: a primal-dual interior-point method with a
//! Fiacco-McCormick barrier, monotone merit line search, and a
//! fraction-to-boundary rule.
//!
//! Problems are posed as
//!
//! ```text
//! min f(x)   s.t.  c_E(x) = 0,  c_I(x) <= 0,  lo <= x <= hi
//! ```
//!
//! with analytic first derivatives supplied through callbacks. The Lagrangian
//! Hessian is optional; when absent it is approximated by central differences
//! of the analytic gradient, which is accurate enough for the problem sizes
//! this crate targets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("initial point or bounds invalid: {0}")]
    BadInput(String),
    #[error("kkt system is singular at iteration {0}")]
    Singular(usize),
    #[error("line search failed at iteration {iter} (kkt error {kkt:.3e})")]
    LineSearchFailure { iter: usize, kkt: f64 },
    #[error("no convergence after {iters} iterations (kkt error {kkt:.3e})")]
    MaxIterations { iters: usize, kkt: f64 },
}

/// Problem callbacks. Inequalities use the `c(x) <= 0` convention.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;

    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Hessian of the Lagrangian `f + y.c_E + lam.c_I`. Return `None` to use
    /// the built-in finite-difference fallback.
    fn lagrangian_hessian(
        &self,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        _lam: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Box bounds; use infinities for free variables.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    fn initial_point(&self) -> DVector<f64>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpmOptions {
    pub tol: f64,
    pub mu_init: f64,
    /// Barrier reduction factor applied once the scaled KKT error drops
    /// below `mu_trigger * mu`.
    pub mu_factor: f64,
    pub mu_trigger: f64,
    /// Fraction-to-boundary coefficient.
    pub tau: f64,
    pub max_iter: usize,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            tol: 1e-8,
            mu_init: 1e-1,
            mu_factor: 0.2,
            mu_trigger: 10.0,
            tau: 0.995,
            max_iter: 300,
        }
    }
}

/// Per-iteration solver record, exportable as CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub mu: f64,
    pub objective: f64,
    pub kkt: f64,
    pub primal_step: f64,
    pub dual_step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpmSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lam: Vec<f64>,
    pub objective: f64,
    pub kkt: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iter,mu,objective,kkt,primal_step,dual_step\n");
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.iter, row.mu, row.objective, row.kkt, row.primal_step, row.dual_step
        ));
    }
    out
}

/// Finite-difference accuracy report from [`check_derivatives`].
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub max_gradient_error: f64,
    pub max_eq_jacobian_error: f64,
    pub max_ineq_jacobian_error: f64,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.max_gradient_error
            .max(self.max_eq_jacobian_error)
            .max(self.max_ineq_jacobian_error)
    }
}

/// Compare analytic first derivatives against central differences at `x`.
pub fn check_derivatives(problem: &dyn NlpProblem, x: &DVector<f64>, h: f64) -> DerivativeReport {
    let n = problem.num_vars();
    let grad = problem.gradient(x);
    let jac_e = problem.eq_jacobian(x);
    let jac_i = problem.ineq_jacobian(x);
    let mut rep = DerivativeReport {
        max_gradient_error: 0.0,
        max_eq_jacobian_error: 0.0,
        max_ineq_jacobian_error: 0.0,
    };
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fd = (problem.objective(&xp) - problem.objective(&xm)) / (2.0 * h);
        rep.max_gradient_error = rep.max_gradient_error.max((grad[j] - fd).abs());
        let (ep, em) = (problem.eq_constraints(&xp), problem.eq_constraints(&xm));
        for i in 0..problem.num_eq() {
            let fd = (ep[i] - em[i]) / (2.0 * h);
            rep.max_eq_jacobian_error = rep.max_eq_jacobian_error.max((jac_e[(i, j)] - fd).abs());
        }
        let (ip, im) = (problem.ineq_constraints(&xp), problem.ineq_constraints(&xm));
        for i in 0..problem.num_ineq() {
            let fd = (ip[i] - im[i]) / (2.0 * h);
            rep.max_ineq_jacobian_error =
                rep.max_ineq_jacobian_error.max((jac_i[(i, j)] - fd).abs());
        }
    }
    rep
}

const BOUND_PUSH: f64 = 1e-2;
const MIN_ALPHA: f64 = 1e-10;

struct IpmState {
    x: DVector<f64>,
    s: DVector<f64>,
    y: DVector<f64>,
    lam: DVector<f64>,
    z_lo: DVector<f64>,
    z_hi: DVector<f64>,
}

/// Primal and dual values carried over from a previous solve.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lam: Vec<f64>,
}

impl From<&IpmSolution> for WarmStart {
    fn from(sol: &IpmSolution) -> Self {
        WarmStart {
            x: sol.x.clone(),
            y: sol.y.clone(),
            lam: sol.lam.clone(),
        }
    }
}

/// Solve `problem` with the interior-point method.
pub fn solve_ipm(problem: &dyn NlpProblem, opts: &IpmOptions) -> Result<IpmSolution, NlpError> {
    solve_ipm_warm(problem, opts, None)
}

/// [`solve_ipm`] with an optional warm start.
pub fn solve_ipm_warm(
    problem: &dyn NlpProblem,
    opts: &IpmOptions,
    warm: Option<&WarmStart>,
) -> Result<IpmSolution, NlpError> {
    let n = problem.num_vars();
    let m_e = problem.num_eq();
    let m_i = problem.num_ineq();
    let (lo, hi) = problem.bounds();
    if lo.len() != n || hi.len() != n {
        return Err(NlpError::Dimension("bounds".into()));
    }
    for j in 0..n {
        if lo[j] > hi[j] {
            return Err(NlpError::BadInput(format!(
                "bound {j}: lo {} > hi {}",
                lo[j], hi[j]
            )));
        }
    }

    // push the start strictly inside the box
    let mut x = match warm {
        Some(w) if w.x.len() == n => DVector::from_vec(w.x.clone()),
        _ => problem.initial_point(),
    };
    if x.len() != n {
        return Err(NlpError::Dimension("initial point".into()));
    }
    for j in 0..n {
        let width = hi[j] - lo[j];
        let push = if width.is_finite() {
            BOUND_PUSH.min(0.1 * width)
        } else {
            BOUND_PUSH
        };
        if lo[j].is_finite() {
            x[j] = x[j].max(lo[j] + push);
        }
        if hi[j].is_finite() {
            x[j] = x[j].min(hi[j] - push);
        }
    }

    let mut mu = opts.mu_init;
    let c_i0 = problem.ineq_constraints(&x);
    let mut st = IpmState {
        s: DVector::from_fn(m_i, |i, _| (-c_i0[i]).max(BOUND_PUSH)),
        x,
        y: DVector::zeros(m_e),
        lam: DVector::from_element(m_i, mu / BOUND_PUSH),
        z_lo: DVector::from_fn(n, |j, _| {
            if lo[j].is_finite() {
                1.0
            } else {
                0.0
            }
        }),
        z_hi: DVector::from_fn(n, |j, _| {
            if hi[j].is_finite() {
                1.0
            } else {
                0.0
            }
        }),
    };
    for i in 0..m_i {
        st.lam[i] = mu / st.s[i];
    }
    if let Some(w) = warm {
        if w.y.len() == m_e {
            st.y = DVector::from_vec(w.y.clone());
        }
        if w.lam.len() == m_i {
            for i in 0..m_i {
                st.lam[i] = w.lam[i].max(1e-8);
            }
        }
    }

    let mut trace = Vec::new();
    let mut nu = 1.0f64; // merit penalty weight
    let mut delta = 0.0; // Hessian regularization

    for iter in 0..opts.max_iter {
        let grad = problem.gradient(&st.x);
        let c_e = problem.eq_constraints(&st.x);
        let c_i = problem.ineq_constraints(&st.x);
        let jac_e = problem.eq_jacobian(&st.x);
        let jac_i = problem.ineq_jacobian(&st.x);

        let kkt = kkt_error(&st, &grad, &c_e, &c_i, &jac_e, &jac_i, &lo, &hi, 0.0);
        trace.push(TraceRow {
            iter,
            mu,
            objective: problem.objective(&st.x),
            kkt,
            primal_step: 0.0,
            dual_step: 0.0,
        });
        if kkt <= opts.tol {
            return Ok(finish(problem, st, kkt, iter, trace));
        }
        // Fiacco-McCormick: shrink the barrier once the inner problem is
        // solved to within a multiple of mu
        while mu > opts.tol / 10.0
            && kkt_error(&st, &grad, &c_e, &c_i, &jac_e, &jac_i, &lo, &hi, mu)
                <= opts.mu_trigger * mu
        {
            mu = (mu * opts.mu_factor).max(opts.tol / 100.0);
        }

        let hess = problem
            .lagrangian_hessian(&st.x, &st.y, &st.lam)
            .unwrap_or_else(|| fd_lagrangian_hessian(problem, &st.x, &st.y, &st.lam));

        // assemble the reduced primal-dual system in (dx, dy)
        let mut dx_dy = None;
        for _attempt in 0..14 {
            let mut kmat = DMatrix::zeros(n + m_e, n + m_e);
            let mut rhs = DVector::zeros(n + m_e);
            for a in 0..n {
                for b in 0..n {
                    kmat[(a, b)] = hess[(a, b)];
                }
                kmat[(a, a)] += delta;
                if lo[a].is_finite() {
                    kmat[(a, a)] += st.z_lo[a] / (st.x[a] - lo[a]);
                }
                if hi[a].is_finite() {
                    kmat[(a, a)] += st.z_hi[a] / (hi[a] - st.x[a]);
                }
            }
            // inequality contribution: Sigma_s = Lam / S on the range of J_I
            for i in 0..m_i {
                let w = st.lam[i] / st.s[i];
                for a in 0..n {
                    for b in 0..n {
                        kmat[(a, b)] += jac_i[(i, a)] * w * jac_i[(i, b)];
                    }
                }
            }
            // dual regularization: keeps the system solvable and the
            // multipliers bounded when equality rows become dependent
            // (e.g. duplicated operating states at a symmetric point)
            let dreg = (1e-2 * mu).max(1e-8);
            for e in 0..m_e {
                for a in 0..n {
                    kmat[(n + e, a)] = jac_e[(e, a)];
                    kmat[(a, n + e)] = jac_e[(e, a)];
                }
                kmat[(n + e, n + e)] = -dreg;
            }

            // dual residual with eliminated bound multipliers
            for a in 0..n {
                let mut r = grad[a];
                for e in 0..m_e {
                    r += jac_e[(e, a)] * st.y[e];
                }
                for i in 0..m_i {
                    // lam_i eliminated through the perturbed complementarity
                    let r_i = c_i[i] + st.s[i];
                    r += jac_i[(i, a)]
                        * (st.lam[i] + (mu - st.s[i] * st.lam[i] + st.lam[i] * r_i) / st.s[i]);
                }
                if lo[a].is_finite() {
                    r += -mu / (st.x[a] - lo[a]);
                }
                if hi[a].is_finite() {
                    r += mu / (hi[a] - st.x[a]);
                }
                rhs[a] = -r;
            }
            for e in 0..m_e {
                rhs[n + e] = -c_e[e];
            }

            match kmat.lu().solve(&rhs) {
                Some(sol) => {
                    dx_dy = Some(sol);
                    break;
                }
                None => {
                    delta = (delta * 10.0).max(1e-8);
                }
            }
        }
        let sol = dx_dy.ok_or(NlpError::Singular(iter))?;
        let dx = sol.rows(0, n).into_owned();
        let dy = sol.rows(n, m_e).into_owned();

        // recover slack and multiplier steps
        let mut ds = DVector::zeros(m_i);
        let mut dlam = DVector::zeros(m_i);
        for i in 0..m_i {
            let jdx: f64 = (0..n).map(|a| jac_i[(i, a)] * dx[a]).sum();
            ds[i] = -(c_i[i] + st.s[i]) - jdx;
            dlam[i] = (mu - st.s[i] * st.lam[i] - st.lam[i] * ds[i]) / st.s[i];
        }
        let mut dz_lo = DVector::zeros(n);
        let mut dz_hi = DVector::zeros(n);
        for a in 0..n {
            if lo[a].is_finite() {
                let d = st.x[a] - lo[a];
                dz_lo[a] = (mu - d * st.z_lo[a] - st.z_lo[a] * dx[a]) / d;
            }
            if hi[a].is_finite() {
                let d = hi[a] - st.x[a];
                dz_hi[a] = (mu - d * st.z_hi[a] + st.z_hi[a] * dx[a]) / d;
            }
        }

        // fraction-to-boundary step caps
        let mut alpha_p = 1.0f64;
        for i in 0..m_i {
            if ds[i] < 0.0 {
                alpha_p = alpha_p.min(-opts.tau * st.s[i] / ds[i]);
            }
        }
        for a in 0..n {
            if lo[a].is_finite() && dx[a] < 0.0 {
                alpha_p = alpha_p.min(-opts.tau * (st.x[a] - lo[a]) / dx[a]);
            }
            if hi[a].is_finite() && dx[a] > 0.0 {
                alpha_p = alpha_p.min(opts.tau * (hi[a] - st.x[a]) / dx[a]);
            }
        }
        let mut alpha_d = 1.0f64;
        for i in 0..m_i {
            if dlam[i] < 0.0 {
                alpha_d = alpha_d.min(-opts.tau * st.lam[i] / dlam[i]);
            }
        }
        for a in 0..n {
            if lo[a].is_finite() && dz_lo[a] < 0.0 {
                alpha_d = alpha_d.min(-opts.tau * st.z_lo[a] / dz_lo[a]);
            }
            if hi[a].is_finite() && dz_hi[a] < 0.0 {
                alpha_d = alpha_d.min(opts.tau * st.z_hi[a] / -dz_hi[a]);
            }
        }

        // monotone merit line search on the barrier problem
        let mult_inf = st
            .y
            .iter()
            .chain(st.lam.iter())
            .fold(1.0f64, |m, v| m.max(v.abs()));
        nu = nu.max(2.0 * mult_inf);
        let merit = |x: &DVector<f64>, s: &DVector<f64>| -> f64 {
            let mut phi = problem.objective(x);
            for i in 0..m_i {
                phi -= mu * s[i].ln();
            }
            for a in 0..n {
                if lo[a].is_finite() {
                    phi -= mu * (x[a] - lo[a]).ln();
                }
                if hi[a].is_finite() {
                    phi -= mu * (hi[a] - x[a]).ln();
                }
            }
            let ce = problem.eq_constraints(x);
            let ci = problem.ineq_constraints(x);
            phi += nu * ce.iter().map(|v| v.abs()).sum::<f64>();
            phi += nu
                * ci.iter()
                    .zip(s.iter())
                    .map(|(c, sv)| (c + sv).abs())
                    .sum::<f64>();
            phi
        };
        let phi0 = merit(&st.x, &st.s);
        let mut alpha = alpha_p;
        let mut accepted = false;
        // inside the Newton basin the merit difference drowns in rounding;
        // take the full fraction-to-boundary step there
        let skip_merit = kkt <= 1e-4;
        while alpha >= MIN_ALPHA {
            let x_t = &st.x + alpha * &dx;
            let s_t = &st.s + alpha * &ds;
            let ok = s_t.iter().all(|&v| v > 0.0)
                && (skip_merit || merit(&x_t, &s_t) <= phi0 - 1e-8 * alpha);
            if ok {
                st.x = x_t;
                st.s = s_t;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // direction unusable: regularize harder and retry next iteration
            delta = (delta * 10.0).max(1e-8);
            if delta > 1e10 {
                return Err(NlpError::LineSearchFailure { iter, kkt });
            }
            continue;
        }
        delta *= 0.3;
        if delta < 1e-12 {
            delta = 0.0;
        }

        st.y += alpha_d * &dy;
        st.lam += alpha_d * &dlam;
        st.z_lo += alpha_d * &dz_lo;
        st.z_hi += alpha_d * &dz_hi;
        for i in 0..m_i {
            st.lam[i] = st.lam[i].max(1e-16);
        }
        for a in 0..n {
            if lo[a].is_finite() {
                st.z_lo[a] = st.z_lo[a].max(1e-16);
            }
            if hi[a].is_finite() {
                st.z_hi[a] = st.z_hi[a].max(1e-16);
            }
        }

        if let Some(last) = trace.last_mut() {
            last.primal_step = alpha;
            last.dual_step = alpha_d;
        }
        log::debug!(
            "ipm iter {iter}: mu {mu:.2e} kkt {kkt:.3e} alpha {alpha:.2e}/{alpha_d:.2e}"
        );
    }

    let grad = problem.gradient(&st.x);
    let c_e = problem.eq_constraints(&st.x);
    let c_i = problem.ineq_constraints(&st.x);
    let jac_e = problem.eq_jacobian(&st.x);
    let jac_i = problem.ineq_jacobian(&st.x);
    let kkt = kkt_error(&st, &grad, &c_e, &c_i, &jac_e, &jac_i, &lo, &hi, 0.0);
    if kkt <= opts.tol {
        let iters = opts.max_iter;
        return Ok(finish(problem, st, kkt, iters, trace));
    }
    Err(NlpError::MaxIterations {
        iters: opts.max_iter,
        kkt,
    })
}

fn finish(
    problem: &dyn NlpProblem,
    st: IpmState,
    kkt: f64,
    iterations: usize,
    trace: Vec<TraceRow>,
) -> IpmSolution {
    IpmSolution {
        objective: problem.objective(&st.x),
        x: st.x.iter().copied().collect(),
        y: st.y.iter().copied().collect(),
        lam: st.lam.iter().copied().collect(),
        kkt,
        iterations,
        trace,
    }
}

#[allow(clippy::too_many_arguments)]
fn kkt_error(
    st: &IpmState,
    grad: &DVector<f64>,
    c_e: &DVector<f64>,
    c_i: &DVector<f64>,
    jac_e: &DMatrix<f64>,
    jac_i: &DMatrix<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    mu: f64,
) -> f64 {
    let n = st.x.len();
    let mut err = 0.0f64;
    for a in 0..n {
        let mut r = grad[a];
        for e in 0..c_e.len() {
            r += jac_e[(e, a)] * st.y[e];
        }
        for i in 0..c_i.len() {
            r += jac_i[(i, a)] * st.lam[i];
        }
        if lo[a].is_finite() {
            r -= st.z_lo[a];
        }
        if hi[a].is_finite() {
            r += st.z_hi[a];
        }
        err = err.max(r.abs());
    }
    for e in 0..c_e.len() {
        err = err.max(c_e[e].abs());
    }
    for i in 0..c_i.len() {
        err = err.max((c_i[i] + st.s[i]).abs());
        err = err.max((st.s[i] * st.lam[i] - mu).abs());
    }
    for a in 0..n {
        if lo[a].is_finite() {
            err = err.max(((st.x[a] - lo[a]) * st.z_lo[a] - mu).abs());
        }
        if hi[a].is_finite() {
            err = err.max(((hi[a] - st.x[a]) * st.z_hi[a] - mu).abs());
        }
    }
    err
}

/// Central-difference Hessian of the Lagrangian from analytic gradients.
fn fd_lagrangian_hessian(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    lam: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let grad_l = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = problem.gradient(x);
        if y.len() > 0 {
            g += problem.eq_jacobian(x).transpose() * y;
        }
        if lam.len() > 0 {
            g += problem.ineq_jacobian(x).transpose() * lam;
        }
        g
    };
    let h = 1e-6;
    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let (gp, gm) = (grad_l(&xp), grad_l(&xm));
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    // symmetrize against finite-difference noise
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}
