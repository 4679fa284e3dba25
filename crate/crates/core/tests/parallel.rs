//! One test per binary: the sequential switch is process-global.

mod common;

use common::{binary, rng, uniform};
use swinca_core::optim::{Optimizer, OptimizerKind};
use swinca_core::train::train_step;
use swinca_core::{par, Model, ModelConfig, Scale, Shape, Tensor};

fn run(sequential: bool) -> (Vec<f32>, Vec<Vec<f32>>, Tensor<f32>) {
    par::set_sequential(sequential);
    let config = ModelConfig::scaled(Scale::new(1, 8).unwrap()).unwrap();
    let mut model = Model::build(&config, 3).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model.store).unwrap();
    let mut r = rng(5);
    let shape = model.input_shape(2);
    let images = uniform::<f32>(shape, &mut r).map(|v| 0.5 + 0.5 * v);
    let ms = Shape::new(2, 1, shape.h(), shape.w());
    let masks = Tensor::from_vec(ms, binary(ms.numel(), 0.3, &mut r)).unwrap();
    let losses = (0..3).map(|_| train_step(&mut model, &mut opt, &images, &masks).unwrap()).collect();
    let params = model.store.params().iter().map(|p| p.value.data().to_vec()).collect();
    let probs = model.predict(&images).unwrap();
    par::set_sequential(false);
    (losses, params, probs)
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let seq = run(true);
    let par_run = run(false);
    assert_eq!(seq.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), par_run.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(seq.1 == par_run.1, "parameters diverged");
    assert_eq!(seq.2, par_run.2);
    assert!(seq.2.data().iter().all(|v| v.is_finite()));
}
