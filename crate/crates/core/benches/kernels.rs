//! Parallel vs. sequential timings for the hot kernels.
//!
//! Each group runs the same workload inside a one-thread pool and inside the
//! default pool. For the fully sequential build, run
//! `cargo bench --no-default-features`; both variants then take the same path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use layergauge::clustering::{kmeans_fit, KMeansConfig};
use layergauge::index::{profile, AnalysisConfig};
use layergauge::knn::{knn_purity, KnnConfig};
use layergauge::par;
use layergauge::probe::ProbeConfig;
use layergauge::synth::{gen_gaussian_mixture, gen_layer_sweep, LayerSeparation, LayerSweepSpec, MixtureSpec};

fn pools() -> [(&'static str, Option<usize>); 2] {
    [("one_thread", Some(1)), ("default_pool", None)]
}

fn bench_kmeans(c: &mut Criterion) {
    let (data, _) = gen_gaussian_mixture(&MixtureSpec {
        n_classes: 10,
        points_per_class: 100,
        dim: 64,
        separation: 4.0,
        seed: 7,
    })
    .unwrap();
    let cfg = KMeansConfig::new(10, 1);
    let mut group = c.benchmark_group("kmeans_1000x64_k10");
    group.sample_size(10);
    for (name, jobs) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || kmeans_fit(black_box(&data), &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_knn(c: &mut Criterion) {
    let (data, labels) = gen_gaussian_mixture(&MixtureSpec {
        n_classes: 5,
        points_per_class: 200,
        dim: 128,
        separation: 2.0,
        seed: 3,
    })
    .unwrap();
    let mut group = c.benchmark_group("knn_1000x128");
    group.sample_size(10);
    for (name, jobs) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || knn_purity(black_box(&data), &labels, &KnnConfig::PerClassCount).unwrap()))
        });
    }
    group.finish();
}

fn bench_profile(c: &mut Criterion) {
    let spec = LayerSweepSpec {
        model: "bench".into(),
        dataset: "sweep".into(),
        seen_classes: 5,
        unseen_classes: 5,
        points_per_class: 60,
        dim: 32,
        layers: [1.0, 2.0, 4.0, 2.0]
            .iter()
            .map(|&u| LayerSeparation { seen: u + 4.0, unseen: u, seed: None })
            .collect(),
        seed: 0,
    };
    let runs: Vec<_> = (0..2)
        .map(|s| gen_layer_sweep(&LayerSweepSpec { seed: s, ..spec.clone() }).unwrap())
        .collect();
    let cfg = AnalysisConfig {
        probe: ProbeConfig {
            train_count: 200,
            test_count: 100,
            ..ProbeConfig::default()
        },
        ..AnalysisConfig::default()
    };
    let mut group = c.benchmark_group("profile_4layers_2seeds");
    group.sample_size(10);
    for (name, jobs) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || profile(black_box(&runs), &cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_kmeans, bench_knn, bench_profile);
criterion_main!(benches);
