use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use splitloc_core::exec::{execute_with, preprocess};
use splitloc_core::frame::Frame;
use splitloc_core::fusion::{corrupt_with, gen_trajectory, NoiseModel};
use splitloc_core::par::Parallelism;
use splitloc_core::weights::init_weights;
use splitloc_core::{build_backbone, Cut, Stop};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn full_network(c: &mut Criterion) {
    let g = build_backbone(56, 2048).unwrap();
    let w = init_weights(&g, 42);
    let x = preprocess(&Frame::synthetic(7, 0, 56, 56), 56).unwrap();
    let mut group = c.benchmark_group("execute_res56");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| execute_with(mode, &g, &w, &x, Cut::NULL, Stop::End).unwrap())
        });
    }
    group.finish();
}

fn noise_model(c: &mut Criterion) {
    let truth = gen_trajectory(200.0, 10.0, 10.0, 1000.0).unwrap();
    let model =
        NoiseModel { sigma_m: 5.0, outlier_prob: 0.05, outlier_scale: 10.0, orientation_sigma_deg: 5.0, seed: 2 };
    let mut group = c.benchmark_group("corrupt_10k_frames");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| corrupt_with(mode, &truth, &model).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, full_network, noise_model);
criterion_main!(benches);
