use std::hint::black_box;
use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedlt::config::{parse_config, Settings};
use fedlt::experiment::Workload;
use fedlt::federation::{run_phase1, run_phase2};
use fedlt::model::{PeftDelta, Role};
use fedlt::par::Executor;

// reference benchmark with every client selected, so each round has ten independent jobs
fn workload(rounds: usize) -> (fedlt::federation::FedConfig, Workload) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let flags = Settings {
        rounds: Some(rounds),
        fraction: Some(1.0),
        ..Settings::default()
    };
    let cfg = parse_config(Some(&path), &flags).unwrap();
    let w = Workload::build(&cfg).unwrap();
    (cfg.fed(), w)
}

fn executors() -> Vec<(&'static str, Executor)> {
    vec![("sequential", Executor::sequential()), ("rayon", Executor::new(0))]
}

fn phase1(c: &mut Criterion) {
    let (fed, w) = workload(5);
    let mut group = c.benchmark_group("phase1_5_rounds");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| black_box(run_phase1(&fed, &w.shards, &w.head, exec, |_, _, _| Ok(())).unwrap()))
        });
    }
    group.finish();
}

fn phase2(c: &mut Criterion) {
    let (fed, w) = workload(0);
    let phi_g = PeftDelta::zeros_like(&w.head, Role::Global);
    let mut group = c.benchmark_group("phase2");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| black_box(run_phase2(&fed, &w.shards, &w.head, &phi_g, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, phase1, phase2);
criterion_main!(benches);
