use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ersatz_core::exec::Backend;
use ersatz_core::reference::isaacs;
use ersatz_core::solver::{scheme_update, solve, StorePolicy};

fn backends(c: &mut Criterion) {
    let mut group = c.benchmark_group("isaacs_step_h64");
    let cfg = isaacs(1.0 / 64.0, 1.0).unwrap();
    let times = cfg.prepare().unwrap();
    let n = times.len() - 1;
    let later: Vec<f64> = (0..cfg.grid.len()).map(|i| (cfg.data)(times[n], cfg.grid.coords(i))).collect();
    for (name, backend) in [("sequential", Backend::Sequential), ("parallel", Backend::Parallel)] {
        let cfg = cfg.clone().with_backend(backend);
        group.bench_function(name, |b| {
            b.iter(|| scheme_update(&cfg, black_box(&later), times[n], times[n - 1]).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("isaacs_solve_h16");
    group.sample_size(10);
    for (name, backend) in [("sequential", Backend::Sequential), ("parallel", Backend::Parallel)] {
        let cfg = isaacs(1.0 / 16.0, 1.0).unwrap().with_backend(backend).with_store(StorePolicy::FinalWithProbes(vec![]));
        group.bench_function(name, |b| b.iter(|| solve(black_box(&cfg)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, backends);
criterion_main!(benches);
