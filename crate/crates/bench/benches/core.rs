use std::hint::black_box;

use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};

use mgn_bench::{clustered_features, pk_batch};
use mgn_core::eval::{euclidean_distances, evaluate, rerank, Protocol, RerankConfig};
use mgn_core::infer::embed;
use mgn_core::loss::{batch_hard_triplet, softmax_loss};
use mgn_core::model::{build_model, ClassifierHead, ModelConfig};

fn bench_eval(c: &mut Criterion) {
    let dim = 256;
    let (qf, qm) = clustered_features(100, dim, 50, 1);
    let (gf, gm) = clustered_features(1000, dim, 50, 2);
    let dist = euclidean_distances(&qf, &gf, dim).unwrap();
    let protocol = Protocol::single("bench");
    c.bench_function("distances 100x1000x256", |b| {
        b.iter(|| euclidean_distances(black_box(&qf), black_box(&gf), dim).unwrap())
    });
    c.bench_function("evaluate 100x1000", |b| {
        b.iter(|| evaluate(black_box(&dist), &qm, &gm, &protocol).unwrap())
    });

    let (qf, _) = clustered_features(50, dim, 25, 3);
    let (gf, _) = clustered_features(200, dim, 25, 4);
    let qg = euclidean_distances(&qf, &gf, dim).unwrap();
    let qq = euclidean_distances(&qf, &qf, dim).unwrap();
    let gg = euclidean_distances(&gf, &gf, dim).unwrap();
    let cfg = RerankConfig::default();
    c.bench_function("rerank 50x200", |b| b.iter(|| rerank(black_box(&qg), &qq, &gg, &cfg).unwrap()));
}

fn bench_losses(c: &mut Criterion) {
    let (features, labels) = pk_batch(16, 4, 256, 5);
    let weight = Tensor::randn(0f32, 0.001, (751, 256), &Device::Cpu).unwrap();
    let head = ClassifierHead::from_tensor(&weight).unwrap();
    c.bench_function("softmax loss 64x256, 751 classes", |b| {
        b.iter(|| softmax_loss(black_box(&features), &labels, &head).unwrap())
    });
    c.bench_function("batch-hard triplet 64x256", |b| {
        b.iter(|| batch_hard_triplet(black_box(&features), &labels, 1.2).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = build_model(&ModelConfig {
        input_size: (96, 32),
        ..ModelConfig::tiny()
    })
    .unwrap();
    let image = Tensor::randn(0f32, 1.0, (1, 3, 96, 32), &Device::Cpu).unwrap();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    group.bench_function("tiny embed 1x96x32", |b| b.iter(|| embed(&model, black_box(&image)).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_eval, bench_losses, bench_forward);
criterion_main!(benches);
