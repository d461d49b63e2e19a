//! Sequential versus data-parallel ensemble runs.
//!
//! The parallel path only differs when the crate is built with the
//! `parallel` feature (the default); without it both rows measure the same
//! sequential loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qest_core::{resolve_policy, run_ensemble, EnsembleConfig, Execution, PolicyStore};

fn bench_ensemble(c: &mut Criterion) {
    let store = PolicyStore::builtin();
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    for policy_id in ["mach_u_20_2", "rand"] {
        let mut cfg = EnsembleConfig::for_rabi_cycles(20.0, policy_id);
        cfg.n_samples = 16;
        cfg.shot_budget = 200;
        cfg.smc.n_particles = 1000;
        let policy = resolve_policy(policy_id, &store, None).expect("built-in policy");
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, policy_id), &exec, |b, &exec| {
                b.iter(|| run_ensemble(black_box(&cfg), &policy, exec).expect("ensemble runs"));
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_ensemble);
criterion_main!(benches);
