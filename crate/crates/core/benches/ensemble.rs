use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wmvda::experiment::{run_ensemble, ExperimentConfig, ExperimentSetup, Scheme};
use wmvda::parallel::Execution;

fn ensemble(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::linear();
    cfg.ensemble_size = 8;
    cfg.system.steps = 60;
    let setup = ExperimentSetup::new(cfg.clone()).unwrap();
    let lambda = cfg.lambdas();

    let mut group = c.benchmark_group("linear_wmvda_ensemble");
    group.sample_size(10);
    for (name, mode) in [("parallel", Execution::Auto), ("sequential", Execution::Sequential)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| run_ensemble(&setup, Scheme::WmVda, &lambda, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
