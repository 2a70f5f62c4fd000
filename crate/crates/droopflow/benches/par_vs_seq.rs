//! Parallel vs sequential batch execution on the two workloads that actually
//! fan out in practice: dense curve tabulation and the oracle's per-segment
//! power flow solves.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use droopflow::curves::{pvdc_deadband_smooth, PVdcDeadbandSpec};
use droopflow::exec::{map_batch_par, map_batch_seq};
use droopflow::network::Network;
use droopflow::pf::{solve_newton, DroopMode, PfOptions};
use droopflow::SmoothingConfig;

fn deadband_spec() -> PVdcDeadbandSpec {
    PVdcDeadbandSpec {
        p_ref: -0.48,
        k_droop: 0.05,
        k_outer: None,
        db_lo: 0.98,
        db_hi: 1.02,
        v_min: 0.95,
        v_max: 1.05,
    }
}

fn bench_curve_batches(c: &mut Criterion) {
    let spec = deadband_spec();
    let mut group = c.benchmark_group("curve_tabulation");
    for n in [10_000usize, 100_000] {
        let grid: Vec<f64> = (0..n).map(|i| 0.9 + 0.2 * i as f64 / n as f64).collect();
        group.bench_with_input(BenchmarkId::new("seq", n), &grid, |b, grid| {
            b.iter(|| {
                map_batch_seq(black_box(grid), |&v| {
                    pvdc_deadband_smooth(&spec, v, 1e-3).unwrap()
                })
            })
        });
        group.bench_with_input(BenchmarkId::new("par", n), &grid, |b, grid| {
            b.iter(|| {
                map_batch_par(black_box(grid), |&v| {
                    pvdc_deadband_smooth(&spec, v, 1e-3).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_pf_batches(c: &mut Criterion) {
    let net = Network::from_json(include_str!("../cases/case5_acdc.json")).unwrap();
    // one independent solve per epsilon, the shape of an enumeration sweep
    let eps_list: Vec<f64> = (0..16).map(|i| 1e-3 * 1.5f64.powi(i)).collect();
    let solve = |&eps: &f64| {
        let opts = PfOptions {
            mode: DroopMode::Deadband,
            use_qvac: true,
            smoothing: SmoothingConfig::fixed(eps).unwrap(),
            ..PfOptions::default()
        };
        solve_newton(&net, &opts).unwrap().mismatch
    };

    let mut group = c.benchmark_group("pf_sweep");
    group.sample_size(20);
    group.bench_function("seq", |b| {
        b.iter(|| map_batch_seq(black_box(&eps_list), solve))
    });
    group.bench_function("par", |b| {
        b.iter(|| map_batch_par(black_box(&eps_list), solve))
    });
    group.finish();
}

criterion_group!(benches, bench_curve_batches, bench_pf_batches);
criterion_main!(benches);
