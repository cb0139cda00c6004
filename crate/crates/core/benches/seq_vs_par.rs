//! Sequential vs. rayon execution of the data-parallel loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochlab::datasets::synthetic_gaussians;
use stochlab::loss::OvrSquare;
use stochlab::model::{Architecture, ScorerParams};
use stochlab::oracle::{build_finite_world, mc_convergence, run_suite, FixedScorer, SuiteConfig};
use stochlab::trainer::evaluate_with;
use stochlab::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn monte_carlo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let world = build_finite_world(5, 2, 4, &mut rng).unwrap();
    let table = FixedScorer::random(4, 5, &mut rng).loss_table(&OvrSquare).unwrap();
    let mut group = c.benchmark_group("mc_convergence");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mc_convergence(&world, &table, &[256, 1024, 4096], 40, 7, exec).unwrap())
        });
    }
    group.finish();
}

fn oracle_grid(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_suite");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = SuiteConfig {
            exec,
            trials: 30,
            sample_sizes: vec![128, 512],
            ..SuiteConfig::quick()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| run_suite(&config).unwrap()));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, test) = synthetic_gaussians(10, 64, 3.0, 1000, &mut rng).unwrap();
    let params = ScorerParams::init(Architecture::Mlp { hidden: 128 }, 64, 10, &mut rng).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_with(&params, test.examples(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo, oracle_grid, evaluation);
criterion_main!(benches);
