use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinca_core::kernels::gemm_nn;
use swinca_core::optim::{Optimizer, OptimizerKind};
use swinca_core::train::train_step;
use swinca_core::{par, Model, ModelConfig, Scale, Shape, Tensor};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, k, n) = (128, 576, 1024);
    let (a, b) = (random(m * k, &mut rng), random(k * n, &mut rng));
    let mut out = vec![0.0f32; m * n];
    let mut group = c.benchmark_group("gemm_128x576x1024");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        group.bench_function(name, |bench| bench.iter(|| gemm_nn(black_box(&a), black_box(&b), &mut out, m, k, n)));
    }
    par::set_sequential(false);
    group.finish();
}

fn network(c: &mut Criterion) {
    let config = ModelConfig::scaled(Scale::new(1, 4).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = Model::build(&config, 0).unwrap().input_shape(2);
    let images = Tensor::from_vec(shape, random(shape.numel(), &mut rng)).unwrap();
    let ms = Shape::new(2, 1, shape.h(), shape.w());
    let masks = Tensor::from_vec(ms, (0..ms.numel()).map(|i| (i % 3 == 0) as u8 as f32).collect()).unwrap();

    let mut group = c.benchmark_group("network_scale_1_4");
    group.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        let model = Model::build(&config, 0).unwrap();
        group.bench_with_input(BenchmarkId::new("predict", name), &images, |bench, x| {
            bench.iter(|| model.predict(black_box(x)).unwrap())
        });
        let mut model = Model::build(&config, 0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-4, &model.store).unwrap();
        group.bench_with_input(BenchmarkId::new("train_step", name), &images, |bench, x| {
            bench.iter(|| train_step(&mut model, &mut opt, black_box(x), &masks).unwrap())
        });
    }
    par::set_sequential(false);
    group.finish();
}

criterion_group!(benches, gemm, network);
criterion_main!(benches);
