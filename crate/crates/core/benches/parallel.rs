use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtil::envs::{generate_demos, EnvKind};
use mtil::eval::policy_success_rate;
use mtil::infer::RolloutConfig;
use mtil::parallel::Exec;
use mtil::policy::{Policy, PolicyConfig};
use mtil::train::{fisher_estimate, FisherKind, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn evaluation(c: &mut Criterion) {
    let kind: EnvKind = "cue-recall:L=30:m=+1".parse().unwrap();
    let policy = Policy::new(PolicyConfig::desk(2, 1, 8), 0).unwrap();
    let cfg = RolloutConfig::default();
    let mut g = c.benchmark_group("success_rate_32_episodes");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| policy_success_rate(black_box(&policy), &kind, &cfg, 32, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn demos(c: &mut Criterion) {
    let kind: EnvKind = "two-stage-reach".parse().unwrap();
    let mut g = c.benchmark_group("generate_demos_200");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_demos(&kind, 200, black_box(3), exec).unwrap())
        });
    }
    g.finish();
}

fn fisher(c: &mut Criterion) {
    let kind: EnvKind = "cue-recall:L=10:m=+1".parse().unwrap();
    let data = generate_demos(&kind, 20, 0, Exec::Sequential).unwrap();
    let policy = Policy::new(PolicyConfig::desk(2, 1, 8), 0).unwrap();
    let mut g = c.benchmark_group("fisher_32_samples");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            chunk_k: 8,
            exec,
            ..Default::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| fisher_estimate(black_box(&policy), &data, 32, cfg, FisherKind::Empirical).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, evaluation, demos, fisher);
criterion_main!(benches);
