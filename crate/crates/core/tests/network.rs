mod common;

use common::{binary, rng, uniform};
use rand::Rng;
use swinca_core::checkpoint::{self, MAGIC};
use swinca_core::loss::combined_loss;
use swinca_core::optim::{Optimizer, OptimizerKind};
use swinca_core::param::Ctx;
use swinca_core::train::train_step;
use swinca_core::{CheckpointError, Error, Graph, Model, ModelConfig, Scale, Shape, Tensor};

fn config(scale: &str) -> ModelConfig {
    ModelConfig::scaled(scale.parse::<Scale>().unwrap()).unwrap()
}

fn images(model: &Model, n: usize, seed: u64) -> Tensor<f32> {
    uniform::<f32>(model.input_shape(n), &mut rng(seed)).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn default_shape_schedule() {
    let s = Model::trace_shapes(&ModelConfig::default(), 1).unwrap();
    let expect = [(64, 128), (128, 64), (256, 32), (512, 16)];
    for (shape, (c, side)) in s.encoder.iter().zip(expect) {
        assert_eq!(*shape, Shape::new(1, c, side, side));
    }
    assert_eq!(s.output, Shape::new(1, 1, 256, 256));
}

#[test]
fn quarter_scale_keeps_the_relative_schedule() {
    let cfg = config("1/4");
    assert_eq!((cfg.input_size, cfg.stage_channels), (64, [16, 32, 64, 128]));
    let s = Model::trace_shapes(&cfg, 2).unwrap();
    let expect = [(16, 32), (32, 16), (64, 8), (128, 4)];
    for (shape, (c, side)) in s.encoder.iter().zip(expect) {
        assert_eq!(*shape, Shape::new(2, c, side, side));
    }
    // The numeric forward agrees with the trace.
    let model = Model::build(&cfg, 0).unwrap();
    let probs = model.predict(&images(&model, 1, 0)).unwrap();
    assert_eq!(probs.shape(), Shape::new(1, 1, 64, 64));
}

#[test]
fn builds_are_deterministic_per_seed() {
    let cfg = config("1/8");
    let a = Model::build(&cfg, 3).unwrap();
    let b = Model::build(&cfg, 3).unwrap();
    let c = Model::build(&cfg, 4).unwrap();
    let same = |x: &Model, y: &Model| x.store.manifest().iter().zip(y.store.manifest()).all(|(p, q)| p == &q);
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn forward_is_pure_and_in_unit_interval() {
    let model = Model::build(&config("1/8"), 1).unwrap();
    let x = images(&model, 2, 5);
    let p1 = model.predict(&x).unwrap();
    let p2 = model.predict(&x).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(p1.shape(), Shape::new(2, 1, 32, 32));
    assert!(p1.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn wrong_input_shape_is_a_dimension_error() {
    let model = Model::build(&config("1/8"), 1).unwrap();
    let x = Tensor::zeros(Shape::new(1, 3, 16, 16));
    assert!(matches!(model.predict(&x), Err(Error::Dimension { .. })));
}

fn loss_with(model: &Model, params: &[Tensor<f64>], x: &Tensor<f64>, y: &Tensor<f64>) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::<f64>::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect::<Vec<_>>();
    let mut cx = Ctx::with_vars(&mut g, &model.store, vars.clone(), true).unwrap();
    let xv = cx.graph.input(x.clone());
    let out = model.forward(&mut cx, xv).unwrap();
    let loss = combined_loss(&mut g, out.probs, y).unwrap();
    let value = g.value(loss).data()[0];
    g.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.grad(v).cloned()).collect())
}

/// The input-facing convolution receives a live gradient that agrees with
/// central differences on three random entries.
#[test]
fn first_layer_gradient_is_live() {
    let model = Model::build(&config("1/16"), 2).unwrap();
    let params: Vec<Tensor<f64>> = model.store.params().iter().map(|p| p.value.cast()).collect();
    let x: Tensor<f64> = images(&model, 2, 3).cast();
    let mut r = rng(6);
    let mask: Vec<f64> = binary(x.shape().n() * 16 * 16, 0.3, &mut r).iter().map(|&v| v as f64).collect();
    let y = Tensor::from_vec(Shape::new(2, 1, 16, 16), mask).unwrap();

    let idx = model.store.params().iter().position(|p| p.name == "enc1.res.proj.weight").unwrap();
    let (_, grads) = loss_with(&model, &params, &x, &y);
    let grad = grads[idx].clone().unwrap();
    assert!(grad.data().iter().any(|&v| v != 0.0));
    let eps = 1e-5;
    for _ in 0..3 {
        let k = r.random_range(0..grad.numel());
        let mut plus = params.clone();
        plus[idx].data_mut()[k] += eps;
        let mut minus = params.clone();
        minus[idx].data_mut()[k] -= eps;
        let numeric = (loss_with(&model, &plus, &x, &y).0 - loss_with(&model, &minus, &x, &y).0) / (2.0 * eps);
        let analytic = grad.data()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        assert!(rel < 1e-2, "entry {k}: {analytic} vs {numeric}");
    }
}

fn synthetic_batch(model: &Model, n: usize) -> (Tensor<f32>, Tensor<f32>) {
    let s = model.config().input_size;
    let mut img = Tensor::zeros(model.input_shape(n));
    let mut mask = Tensor::zeros(Shape::new(n, 1, s, s));
    for b in 0..n {
        let (cy, cx, rad) = (s as f64 * (0.35 + 0.3 * b as f64), s as f64 * 0.5, s as f64 * 0.2);
        for y in 0..s {
            for x in 0..s {
                let inside = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= rad;
                mask.set(b, 0, y, x, inside as u8 as f32);
                for c in 0..3 {
                    let texture = 0.1 * ((x * 7 + y * 3 + c) % 5) as f32;
                    img.set(b, c, y, x, if inside { 0.2 } else { 0.6 } + texture);
                }
            }
        }
    }
    (img, mask)
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let mut model = Model::build(&config("1/8"), 0).unwrap();
    let before: Vec<Tensor<f32>> = model.store.params().iter().map(|p| p.value.clone()).collect();
    let (x, y) = synthetic_batch(&model, 2);
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let mut opt = Optimizer::new(kind, 0.0, &model.store).unwrap();
        for _ in 0..2 {
            train_step(&mut model, &mut opt, &x, &y).unwrap();
        }
        for (p, b) in model.store.params().iter().zip(&before) {
            assert_eq!(&p.value, b, "{}", p.name);
        }
    }
}

#[test]
fn train_step_rejects_non_binary_masks() {
    let mut model = Model::build(&config("1/8"), 0).unwrap();
    let (x, mut y) = synthetic_batch(&model, 1);
    y.data_mut()[0] = 0.5;
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model.store).unwrap();
    assert!(matches!(train_step(&mut model, &mut opt, &x, &y), Err(Error::Validation(_))));
}

#[test]
fn repeated_steps_on_one_batch_reduce_smoothed_loss() {
    let mut model = Model::build(&config("1/8"), 0).unwrap();
    let (x, y) = synthetic_batch(&model, 2);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model.store).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| train_step(&mut model, &mut opt, &x, &y).unwrap() as f64).collect();
    let window_means: Vec<f64> = losses.chunks(40).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in window_means.windows(2) {
        assert!(w[1] < w[0], "smoothed loss {window_means:?}");
    }
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let cfg = config("1/8");
    let mut model = Model::build(&cfg, 9).unwrap();
    // A few steps so batch-norm running statistics move off their defaults.
    let (x, y) = synthetic_batch(&model, 2);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, &model.store).unwrap();
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &x, &y).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load(&path, &cfg).unwrap();
    for (a, b) in model.store.manifest().iter().zip(loaded.store.manifest()) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let p1 = model.predict(&x).unwrap();
    let p2 = loaded.predict(&x).unwrap();
    assert_eq!(p1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

fn checkpoint_error(bytes: &[u8], cfg: &ModelConfig) -> CheckpointError {
    match checkpoint::from_bytes(bytes, cfg) {
        Err(Error::Checkpoint(e)) => e,
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt checkpoint accepted"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = config("1/8");
    let bytes = checkpoint::to_bytes(&Model::build(&cfg, 1).unwrap()).unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
        let e = checkpoint_error(&bytes[..cut], &cfg);
        assert!(matches!(e, CheckpointError::Truncated(_) | CheckpointError::BadMagic), "cut {cut}: {e}");
    }
    assert!(matches!(checkpoint_error(&bytes[..bytes.len() - 1], &cfg), CheckpointError::Truncated(_)));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint_error(&bad, &cfg), CheckpointError::BadMagic));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(checkpoint_error(&bad, &cfg), CheckpointError::UnsupportedVersion(2)));

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(checkpoint_error(&bad, &cfg), CheckpointError::ManifestMismatch(_)));

    // A 1/4-scale checkpoint does not fit a full-scale model.
    let quarter = checkpoint::to_bytes(&Model::build(&config("1/4"), 1).unwrap()).unwrap();
    assert!(matches!(checkpoint_error(&quarter, &ModelConfig::default()), CheckpointError::ManifestMismatch(_)));

    // Same tensor shapes, different hyperparameters.
    let mut other = cfg.clone();
    other.window = 2;
    assert!(matches!(checkpoint_error(&bytes, &other), CheckpointError::ConfigMismatch { .. }));

    let codes: Vec<u8> = [
        CheckpointError::BadMagic,
        CheckpointError::UnsupportedVersion(0),
        CheckpointError::Truncated(0),
        CheckpointError::ManifestMismatch(String::new()),
        CheckpointError::ConfigMismatch { expected: 0, found: 0 },
    ]
    .iter()
    .map(|e| e.code())
    .collect();
    let mut unique = codes.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), codes.len());
}
