use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sparse_pose_bench::{random_matrix, random_scores, toy_fixture};
use sparse_pose_core::ledger::select_patches;
use sparse_pose_core::tensor::matmul;
use sparse_pose_core::{flops_estimate, ModelConfig, TrainConfig, Trainer};

fn kernels(c: &mut Criterion) {
    let a = random_matrix(64, 192, 1);
    let b = random_matrix(192, 64, 2);
    c.bench_function("matmul_64x192x64", |bch| {
        bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });

    let scores = random_scores(192, 3);
    c.bench_function("select_192_patches", |bch| {
        bch.iter(|| select_patches(black_box(&scores), 0.4).unwrap())
    });

    let cfg = ModelConfig::profile("base-256").unwrap();
    c.bench_function("flops_base_256", |bch| {
        bch.iter(|| flops_estimate(black_box(&cfg), true))
    });
}

fn toy_model(c: &mut Criterion) {
    let (model, samples) = toy_fixture(8);
    let img = &samples[0].image;
    // q_thres 0 always exits after the coarse stage; above 1 always refines
    c.bench_function("toy_infer_coarse_only", |bch| {
        bch.iter(|| model.infer_with(img, 0.0).unwrap())
    });
    c.bench_function("toy_infer_refined", |bch| {
        bch.iter(|| model.infer_with(img, 2.0).unwrap())
    });

    let train = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, train, 0).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("toy_step_batch_8", |bch| {
        bch.iter(|| trainer.step(&batch, 0.03, 1e-4).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels, toy_model);
criterion_main!(benches);
