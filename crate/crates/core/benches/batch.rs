use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geocloud::batch::{run_batch, run_batch_sequential, Job};
use geocloud::{ControllerKind, SimulationConfig};

fn jobs(n: u64) -> Vec<Job> {
    (0..n)
        .map(|seed| {
            let mut cfg = SimulationConfig::default();
            cfg.simulation.seed = seed;
            cfg.simulation.steps = 24;
            cfg.inventory.pm_count = 50;
            cfg.workload.vm_count = 100;
            (cfg, ControllerKind::Bcffs)
        })
        .collect()
}

fn bench_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_batch");
    group.sample_size(10);
    for n in [4u64, 16] {
        let batch = jobs(n);
        group.bench_with_input(BenchmarkId::new("sequential", n), &batch, |b, j| {
            b.iter(|| run_batch_sequential(j))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &batch, |b, j| {
            b.iter(|| run_batch(j))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
