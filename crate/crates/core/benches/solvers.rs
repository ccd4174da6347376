//! Single-worker against full-pool timings for the row-parallel kernels.
//!
//! `jobs1` pins the pool to one thread; `pool` uses every available core.
//! Build with `--no-default-features` to time the rayon-free fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sarqc_core::harness::ExperimentSpec;
use sarqc_core::oracle::{hoeffding_check, HoeffdingConfig};
use sarqc_core::par;
use sarqc_core::saliency::SaliencyProfile;
use sarqc_core::solver_gbs::{build_curvature, run_gbs};
use sarqc_core::solver_gs::{run_gs, GsConfig};
use std::hint::black_box;

fn modes() -> [(&'static str, usize); 2] {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    [("jobs1", 1), ("pool", all)]
}

fn bench_gbs(c: &mut Criterion) {
    let spec = ExperimentSpec::default();
    let inst = spec.instance(0, 256).expect("instance");
    let profile = SaliencyProfile::identity(spec.layer.d_in);
    let curv = build_curvature(&inst.calib, &profile, 0.5).expect("curvature");
    let scheme = ExperimentSpec::scheme_default();
    let mut g = c.benchmark_group("run_gbs_64x128");
    for (name, jobs) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || run_gbs(black_box(&inst.w), &curv, &scheme, 128).expect("gbs")))
        });
    }
    g.finish();
}

fn bench_gs(c: &mut Criterion) {
    let spec = ExperimentSpec::default();
    let inst = spec.instance(1, 128).expect("instance");
    let cfg = GsConfig { scheme: ExperimentSpec::scheme_default(), ..GsConfig::default() };
    let mut g = c.benchmark_group("run_gs_alpha_grid");
    g.sample_size(20);
    for (name, jobs) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || run_gs(black_box(&inst.w), &inst.calib, &cfg).expect("gs")))
        });
    }
    g.finish();
}

fn bench_hoeffding(c: &mut Criterion) {
    let cfg = HoeffdingConfig { trials: 1000, heldout_factor: 10, ..HoeffdingConfig::default() };
    let mut g = c.benchmark_group("hoeffding_1000_trials");
    g.sample_size(10);
    for (name, jobs) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || hoeffding_check(black_box(&cfg)).expect("hoeffding")))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gbs, bench_gs, bench_hoeffding);
criterion_main!(benches);
