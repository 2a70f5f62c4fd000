//! Acceptance gate: one test per criterion, each printing a single pass line
//! (visible with `--nocapture`) and enforcing its own runtime budget.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use droopflow::curves::DroopCurve;
use droopflow::network::Network;
use droopflow::nlp::{check_derivatives, IpmOptions, NlpProblem};
use droopflow::opf::{
    build_opf, build_scopf, epsilon_continuation, DroopModeConfig, Scenario, SolveStatus,
};
use droopflow::oracle::solve_exact_piecewise;
use droopflow::pf::{solve_newton, DroopMode, PfOptions};
use droopflow::smooth::{exact_clamp, relu, softplus};
use droopflow::SmoothingConfig;

const LN2: f64 = std::f64::consts::LN_2;

fn case5() -> Network {
    Network::from_json(include_str!("../cases/case5_acdc.json")).unwrap()
}

fn scenario_cfg(s: Scenario) -> DroopModeConfig {
    DroopModeConfig::for_scenario(s, SmoothingConfig::default())
}

/// The four droop curve families instantiated from the fixture, with the
/// driver range each is tabulated over.
fn fixture_curves(net: &Network) -> Vec<(String, DroopCurve, f64, f64)> {
    let c1 = &net.converters[0];
    let lin = c1.pvdc_linear.clone().unwrap();
    let db = c1.pvdc_deadband.clone().unwrap();
    let qv = c1.qvac.clone().unwrap();
    vec![
        (
            "gen_p(g1)".into(),
            DroopCurve::GenP(net.generators[0].p_response.clone()),
            -2.0,
            2.0,
        ),
        (
            "pvdc_linear(c1)".into(),
            DroopCurve::PVdcLinear(lin.clone()),
            lin.v_min - 0.05,
            lin.v_max + 0.05,
        ),
        (
            "pvdc_deadband(c1)".into(),
            DroopCurve::PVdcDeadband(db.clone()),
            db.v_min - 0.05,
            db.v_max + 0.05,
        ),
        (
            "qvac(c1)".into(),
            DroopCurve::QVac(qv.clone()),
            qv.v_min - 0.05,
            qv.v_max + 0.05,
        ),
    ]
}

#[test]
fn criterion_1_softplus_envelope_bound() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let eps = 10f64.powf(rng.gen_range(-6.0..-1.0));
        let x = rng.gen_range(-10.0..10.0);
        let gap = softplus(x, eps).unwrap() - relu(x);
        assert!(gap >= -1e-15, "softplus under-approximates at x={x}, eps={eps}");
        assert!(
            gap <= eps * LN2 + 1e-12,
            "gap {gap} exceeds eps*ln2 at x={x}, eps={eps}"
        );
        worst = worst.max(gap / (eps * LN2));
    }
    let dt = t.elapsed().as_secs_f64();
    assert!(dt < 1.0, "criterion 1 budget exceeded: {dt:.2}s");
    println!("criterion 1: pass - softplus-relu within eps*ln2 on 1e5 points (worst {:.3} of bound, {dt:.2}s)", worst);
}

#[test]
fn criterion_2_curve_sup_gap_and_eps_scaling() {
    let t = Instant::now();
    let net = case5();
    for (name, curve, lo, hi) in fixture_curves(&net) {
        let n = 2001usize;
        let grid: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        let terms = curve.softplus_terms() as f64;
        let mut sup = [0.0f64; 2];
        for (j, eps) in [1e-2, 1e-3].into_iter().enumerate() {
            let bound = terms * eps * LN2 + 1e-9;
            for &v in &grid {
                let gap = (curve.smooth(v, eps).unwrap() - curve.exact(v)).abs();
                assert!(
                    gap <= bound,
                    "{name}: gap {gap} at v={v}, eps={eps} exceeds {bound}"
                );
                sup[j] = sup[j].max(gap);
            }
        }
        // the gap shrinks (at least) linearly in eps
        assert!(
            sup[1] <= 0.11 * sup[0],
            "{name}: sup gap {} at eps=1e-3 vs {} at eps=1e-2",
            sup[1],
            sup[0]
        );
    }
    let dt = t.elapsed().as_secs_f64();
    assert!(dt < 5.0, "criterion 2 budget exceeded: {dt:.2}s");
    println!("criterion 2: pass - sup gaps within N*eps*ln2 and linear in eps for 4 curve families ({dt:.2}s)");
}

#[test]
fn criterion_3_nlp_derivatives_match_finite_differences() {
    let t = Instant::now();
    let net = case5();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let problems: Vec<(&str, Box<dyn NlpProblem>)> = vec![
        ("opf/i", Box::new(build_opf(&net, &scenario_cfg(Scenario::I)).unwrap())),
        ("opf/v", Box::new(build_opf(&net, &scenario_cfg(Scenario::V)).unwrap())),
        (
            "scopf/ii",
            Box::new(build_scopf(&net, &scenario_cfg(Scenario::II)).unwrap()),
        ),
    ];
    for (name, problem) in &problems {
        let x0 = problem.initial_point();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mut x = x0.clone();
            for v in x.iter_mut() {
                *v += rng.gen_range(-1e-3..1e-3);
            }
            let rep = check_derivatives(problem.as_ref(), &x, 1e-6);
            worst = worst.max(rep.max_error());
        }
        assert!(worst < 1e-5, "{name}: max derivative error {worst}");
    }
    let dt = t.elapsed().as_secs_f64();
    assert!(dt < 10.0, "criterion 3 budget exceeded: {dt:.2}s");
    println!("criterion 3: pass - analytic first derivatives match central differences at 100 random points per problem ({dt:.2}s)");
}

#[test]
fn criterion_4_power_flow_from_flat_start() {
    let net = case5();
    let mut lines = Vec::new();
    for mode in [DroopMode::None, DroopMode::Linear, DroopMode::Deadband] {
        let opts = PfOptions {
            mode,
            use_qvac: mode == DroopMode::Deadband,
            ..PfOptions::default()
        };
        let t = Instant::now();
        let sol = solve_newton(&net, &opts).unwrap();
        let dt = t.elapsed().as_secs_f64();
        assert!(
            sol.iterations <= 20,
            "{mode:?}: {} iterations",
            sol.iterations
        );
        assert!(sol.mismatch <= 1e-8, "{mode:?}: mismatch {}", sol.mismatch);
        assert!(dt < 0.5, "{mode:?}: {dt:.2}s per solve");
        lines.push(format!("{mode:?} {} iters", sol.iterations));
    }
    println!(
        "criterion 4: pass - flat-start pf converges to 1e-8 in <=20 iterations ({})",
        lines.join(", ")
    );
}

#[test]
fn criterion_5_smooth_opf_matches_oracle() {
    let t = Instant::now();
    let net = case5();
    let cfg = scenario_cfg(Scenario::V);

    let t_smooth = Instant::now();
    let mut problem = build_opf(&net, &cfg).unwrap();
    let res = epsilon_continuation(&mut problem, &IpmOptions::default()).unwrap();
    let smooth_wall = t_smooth.elapsed().as_secs_f64();
    assert_eq!(res.status, SolveStatus::Converged);

    let oracle = solve_exact_piecewise(&net, &cfg, &IpmOptions::default()).unwrap();
    let rows = problem.droop_handles().len() as f64;
    let eps = problem.epsilon();
    let tol = (1e-4 * oracle.objective.abs()).max(5.0 * eps * LN2 * rows);
    let gap = (res.solution.objective - oracle.objective).abs();
    assert!(
        gap <= tol,
        "smooth {} vs oracle {} (gap {gap}, tol {tol})",
        res.solution.objective,
        oracle.objective
    );
    assert!(
        smooth_wall < oracle.total_time_s,
        "smooth {smooth_wall:.3}s not faster than oracle enumeration {:.3}s",
        oracle.total_time_s
    );
    let dt = t.elapsed().as_secs_f64();
    assert!(dt < 60.0, "criterion 5 budget exceeded: {dt:.2}s");
    println!(
        "criterion 5: pass - objective gap {gap:.2e} <= {tol:.2e} over {} assignments; smooth {smooth_wall:.2}s vs oracle {:.2}s ({dt:.2}s)",
        oracle.records.len(),
        oracle.total_time_s
    );
}

#[test]
fn criterion_6_deadband_interior_holds_reference_power() {
    let eps = 1e-3;
    let net = case5();
    let spec = net.converters[0].pvdc_deadband.clone().unwrap();

    // curve level: deep inside the deadband the smooth curve sits on p_ref
    for i in 0..=100 {
        let v = (spec.db_lo + 0.005) + (spec.db_hi - spec.db_lo - 0.01) * i as f64 / 100.0;
        let p = droopflow::curves::pvdc_deadband_smooth(&spec, v, eps).unwrap();
        assert!(
            (p - spec.p_ref).abs() <= 5.0 * eps,
            "curve leaks {} at v={v}",
            p - spec.p_ref
        );
    }

    // solver level: a setpoint whose export matches the deadband reference
    // after line losses leaves the dc voltage free to settle mid-deadband,
    // where losses close the balance exactly
    let opts = PfOptions {
        mode: DroopMode::Deadband,
        ..PfOptions::default()
    };
    let mut tuned = net.clone();
    tuned.converters[1].p_dc_set = 0.4845;
    let sol = solve_newton(&tuned, &opts).unwrap();

    let c1 = sol.converter("c1").unwrap();
    assert!(
        spec.db_lo + 5.0 * eps < c1.v_dc && c1.v_dc < spec.db_hi - 5.0 * eps,
        "driver voltage {} not inside deadband [{}, {}] by 5 eps",
        c1.v_dc,
        spec.db_lo,
        spec.db_hi
    );
    let dev = (c1.p_dc - spec.p_ref).abs();
    assert!(dev <= 5.0 * eps, "deadband converter deviates {dev} from p_ref");
    println!(
        "criterion 6: pass - in-deadband converter holds p_ref to {dev:.2e} <= 5 eps (v_dc {:.5})",
        c1.v_dc
    );
}

#[test]
fn criterion_7_scopf_response_coupling() {
    let t = Instant::now();
    let net = case5();
    let mut problem = build_scopf(&net, &scenario_cfg(Scenario::II)).unwrap();
    let res = epsilon_continuation(&mut problem, &IpmOptions::default()).unwrap();
    assert_eq!(res.status, SolveStatus::Converged);
    let x = &res.solution.x;
    let eps = problem.epsilon();

    let mut responders = 0usize;
    let mut pinned = 0usize;
    let mut qv_checked = 0usize;
    for (k, state) in problem.states().iter().enumerate().skip(1) {
        let delta = problem.delta(x, k).unwrap();
        for gen in &state.net.generators {
            let p0 = problem.gen_p(x, 0, &gen.id).unwrap();
            let pk = problem.gen_p(x, k, &gen.id).unwrap();
            if gen.responding {
                // (a) smooth clamp of the droop response
                let spec = &gen.p_response;
                let target = exact_clamp(p0 + spec.alpha * delta, spec.p_min, spec.p_max);
                assert!(
                    (pk - target).abs() <= 2.0 * eps * LN2 + 1e-8,
                    "{}/{}: {pk} vs target {target}",
                    state.label,
                    gen.id
                );
                responders += 1;

                // (c) reactive headroom implies the base voltage is held
                let q = problem.gen_q(x, k, &gen.id).unwrap();
                let (vp, vmn) = problem.margins(x, k, &gen.id).unwrap();
                if vp - (q - gen.qv.q_min) <= -10.0 * eps
                    && vmn - (gen.qv.q_max - q) <= -10.0 * eps
                {
                    let v0 = problem.bus_vm(x, 0, &gen.bus_id).unwrap();
                    let vk = problem.bus_vm(x, k, &gen.bus_id).unwrap();
                    assert!(
                        (vk - v0).abs() <= 5.0 * eps,
                        "{}/{}: |{vk} - {v0}| > 5 eps",
                        state.label,
                        gen.id
                    );
                    qv_checked += 1;
                }
            } else {
                // (b) non-responders are pinned to their base dispatch
                assert!(
                    (pk - p0).abs() <= 1e-8,
                    "{}/{}: non-responder moved by {}",
                    state.label,
                    gen.id,
                    pk - p0
                );
                pinned += 1;
            }
        }
    }
    assert!(responders >= 3, "only {responders} responder checks");
    assert!(pinned >= 2, "only {pinned} non-responder checks");
    assert!(qv_checked >= 1, "no generator had reactive headroom to check");
    let dt = t.elapsed().as_secs_f64();
    assert!(dt < 120.0, "criterion 7 budget exceeded: {dt:.2}s");
    println!(
        "criterion 7: pass - {responders} responder, {pinned} pinned and {qv_checked} voltage-hold checks across contingency states ({dt:.2}s)"
    );
}

#[test]
fn criterion_8_large_case_benchmark() {
    println!("criterion 8: skipped - requires an external large-case dataset that is not bundled");
}
