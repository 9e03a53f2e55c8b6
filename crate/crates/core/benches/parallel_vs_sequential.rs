//! The same workloads on a one-thread pool and on the default pool.
//! Build with `--no-default-features` to time the plain-loop fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fracnls::fbm::{kernel_covariance_matrix, sample_fbm_exact, TimeGrid};
use fracnls::field::GridSpec;
use fracnls::kernel::HurstKernel;
use fracnls::noise::{build_correlation, build_l_refined};
use rayon::ThreadPoolBuilder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut out = vec![("1-thread".to_string(), ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if all > 1 {
        out.push((format!("{all}-threads"), ThreadPoolBuilder::new().num_threads(all).build().unwrap()));
    }
    out
}

fn bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("parallel_vs_sequential");
    g.sample_size(10);
    let tg = TimeGrid::new(1.0, 64).unwrap();
    let k = HurstKernel::new(0.7).unwrap();
    let grid = GridSpec::new(1, 8, std::f64::consts::FRAC_PI_2).unwrap();
    let spec = build_correlation(grid, 8.0, 0.7, 0.3).unwrap().truncated(4);
    let small = TimeGrid::new(1.0, 8).unwrap();
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("fbm_exact_2000x64", &name), |b| {
            b.iter(|| pool.install(|| sample_fbm_exact(0.7, &tg, 2000, 1).unwrap()))
        });
        g.bench_function(BenchmarkId::new("kernel_covariance_matrix_64", &name), |b| {
            b.iter(|| pool.install(|| kernel_covariance_matrix(&k, &tg)))
        });
        g.bench_function(BenchmarkId::new("build_l_4modes_n8", &name), |b| {
            b.iter(|| pool.install(|| build_l_refined(&spec, &k, &small, 2).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
