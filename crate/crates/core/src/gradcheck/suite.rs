//! The standard gradient suite: every differentiable primitive, every
//! composite block and the whole network at scale 1/16.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradReport, Probe};
use crate::autograd::{Activation, BnMode, Graph, PoolMode, Var};
use crate::error::Result;
use crate::network::{Model, ModelConfig, Scale};
use crate::nn::{ConvRelu, Mlp, ResidualBlock};
use crate::param::{Ctx, ParamStore};
use crate::refine::{log_enhance, log_kernel, Mscas, PixelAttention};
use crate::swin::SwinBlock;
use crate::tensor::{Shape, Tensor};

pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tier {
    Primitive,
    Block,
    Network,
}

impl Tier {
    pub fn tolerance(self) -> f64 {
        match self {
            Tier::Primitive => 1e-4,
            Tier::Block => 1e-3,
            Tier::Network => 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub tier: Tier,
    pub report: GradReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tier.tolerance()
    }
}

fn rand_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Values bounded away from zero so ReLU kinks stay out of the stencil.
fn off_zero(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut t = rand_tensor(shape, seed, 0.1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(out * R)` for a fixed random `R`, so every output element carries a
/// distinct weight.
fn weighted(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let r = g.input(rand_tensor(g.shape(out), 991, -1.0, 1.0));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

/// Nudge every parameter off its initial value so zero biases and unit
/// gains are not special points.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
}

#[derive(Default)]
struct Cases(Vec<CaseResult>);

impl Cases {
    fn prim<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let report = check_gradients(inputs, Probe::All, EPS, |g, v| {
            let out = f(g, v)?;
            weighted(g, out)
        })?;
        self.0.push(CaseResult { name: name.to_string(), tier: Tier::Primitive, report });
        Ok(())
    }

    /// Gradients with respect to the block input and every parameter.
    #[allow(clippy::too_many_arguments)]
    fn block<F>(&mut self, name: &str, tier: Tier, store: &ParamStore, x: Tensor<f64>, training: bool, probe: Probe, f: F) -> Result<()>
    where
        F: Fn(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    {
        let mut inputs = vec![x];
        inputs.extend(store.params().iter().map(|p| p.value.cast::<f64>()));
        let report = check_gradients(&inputs, probe, EPS, |g, v| {
            let mut cx = Ctx::with_vars(g, store, v[1..].to_vec(), training)?;
            let out = f(&mut cx, v[0])?;
            weighted(cx.graph, out)
        })?;
        self.0.push(CaseResult { name: name.to_string(), tier, report });
        Ok(())
    }
}

pub fn primitives() -> Result<Vec<CaseResult>> {
    let mut c = Cases::default();
    let r = rand_tensor;

    let x = r(Shape::new(2, 3, 5, 6), 1, -1.0, 1.0);
    let w = r(Shape::new(4, 3, 3, 3), 2, -0.5, 0.5);
    let b = r(Shape::new(1, 1, 1, 4), 3, -0.5, 0.5);
    c.prim("conv3x3", &[x.clone(), w.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1))?;
    c.prim("conv3x3 stride 2", &[x.clone(), w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))?;
    let w1 = r(Shape::new(2, 3, 1, 1), 4, -0.5, 0.5);
    c.prim("conv1x1", &[x, w1], |g, v| g.conv2d(v[0], v[1], None, 1, 0))?;

    // Distinct values so max pooling has no ties.
    let x = Tensor::from_vec(Shape::new(1, 2, 4, 6), (0..48).map(|i| ((i * 37) % 48) as f64 * 0.1).collect())?;
    c.prim("avg pool", std::slice::from_ref(&x), |g, v| g.pool2d(v[0], PoolMode::Avg, 2))?;
    c.prim("max pool", std::slice::from_ref(&x), |g, v| g.pool2d(v[0], PoolMode::Max, 2))?;
    c.prim("upsample", &[x], |g, v| g.upsample2x(v[0]))?;

    let k: Vec<f64> = log_kernel().to_vec();
    c.prim("depthwise LoG", &[r(Shape::new(1, 2, 6, 7), 5, -1.0, 1.0)], |g, v| g.depthwise_fixed(v[0], &k, 5))?;

    let x = r(Shape::new(2, 1, 3, 5), 6, -2.0, 2.0);
    let gamma = r(Shape::new(1, 1, 1, 5), 7, 0.5, 1.5);
    let beta = r(Shape::new(1, 1, 1, 5), 8, -0.5, 0.5);
    c.prim("layer norm", &[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    let x = r(Shape::new(2, 3, 3, 3), 9, -2.0, 2.0);
    let gamma = r(Shape::new(1, 1, 1, 3), 10, 0.5, 1.5);
    let beta = r(Shape::new(1, 1, 1, 3), 11, -0.5, 0.5);
    c.prim("batch norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?.0)
    })?;
    let (mean, var) = ([0.1, -0.2, 0.3], [1.5, 0.7, 2.0]);
    c.prim("batch norm eval", &[x, gamma, beta], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?.0)
    })?;

    let x = r(Shape::new(2, 1, 3, 4), 12, -1.0, 1.0);
    let w = r(Shape::new(1, 1, 5, 4), 13, -1.0, 1.0);
    let b = r(Shape::new(1, 1, 1, 5), 14, -1.0, 1.0);
    c.prim("linear", &[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])))?;
    let a = r(Shape::new(2, 2, 3, 4), 15, -1.0, 1.0);
    let bt = r(Shape::new(2, 2, 5, 4), 16, -1.0, 1.0);
    let bn = r(Shape::new(2, 2, 4, 5), 17, -1.0, 1.0);
    c.prim("matmul a.b^T", &[a.clone(), bt], |g, v| g.matmul(v[0], v[1], true))?;
    c.prim("matmul a.b", &[a, bn], |g, v| g.matmul(v[0], v[1], false))?;
    c.prim("softmax", &[r(Shape::new(1, 2, 3, 6), 18, -2.0, 2.0)], |g, v| g.softmax(v[0]))?;

    let x = off_zero(Shape::new(1, 2, 3, 4), 19);
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Gelu] {
        c.prim(&format!("{kind:?}"), std::slice::from_ref(&x), |g, v| Ok(g.activate(v[0], kind)))?;
    }

    let s = Shape::new(2, 3, 2, 4);
    let a = r(s, 20, -1.0, 1.0);
    let b = r(s, 21, -1.0, 1.0);
    c.prim("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
    c.prim("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?;
    c.prim("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))?;
    c.prim("scale", std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -2.5)))?;
    c.prim("add const", std::slice::from_ref(&a), |g, v| g.add_const(v[0], &b))?;
    let cs = r(Shape::new(2, 3, 1, 1), 22, -1.0, 1.0);
    c.prim("channel scale", &[a.clone(), cs], |g, v| g.channel_scale(v[0], v[1]))?;
    let m = r(Shape::new(2, 1, 2, 4), 23, 0.0, 1.0);
    c.prim("pixel gate", &[a.clone(), m], |g, v| g.pixel_gate(v[0], v[1]))?;
    c.prim("gap", &[a], |g, v| Ok(g.gap(v[0])))?;

    let a = r(Shape::new(2, 2, 3, 3), 24, -1.0, 1.0);
    let b = r(Shape::new(2, 3, 3, 3), 25, -1.0, 1.0);
    c.prim("concat", &[a.clone(), b], |g, v| g.concat_channels(v[0], v[1]))?;
    c.prim("reshape", std::slice::from_ref(&a), |g, v| g.reshape(v[0], Shape::new(1, 4, 9, 1)))?;
    let index: Vec<usize> = (0..a.numel()).rev().chain([0, 5, 5]).collect();
    let n = index.len();
    c.prim("gather", &[a], move |g, v| g.gather(v[0], index.clone(), Shape::new(1, 1, 1, n)))?;

    let x = r(Shape::new(1, 2, 3, 3), 26, -1.0, 1.0);
    c.prim("sum", std::slice::from_ref(&x), |g, v| Ok(g.sum(v[0])))?;
    c.prim("mean", &[x], |g, v| Ok(g.mean(v[0])))?;
    let p = r(Shape::new(2, 1, 3, 3), 27, 0.05, 0.95);
    let y = r(Shape::new(2, 1, 3, 3), 28, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    c.prim("bce", std::slice::from_ref(&p), |g, v| g.bce_loss(v[0], &y))?;
    c.prim("dice", &[p], |g, v| g.dice_loss(v[0], &y))?;
    Ok(c.0)
}

pub fn blocks() -> Result<Vec<CaseResult>> {
    let mut c = Cases::default();
    let r = rand_tensor;
    let all = Probe::All;

    for (cin, cout) in [(3, 4), (4, 4)] {
        let mut s = ParamStore::new(1);
        let b = ResidualBlock::new(&mut s, "res", cin, cout)?;
        jitter(&mut s, 2);
        let x = r(Shape::new(2, cin, 5, 5), 3, -1.0, 1.0);
        c.block(&format!("residual {cin}->{cout}"), Tier::Block, &s, x, true, all, |cx, x| b.forward(cx, x))?;
    }

    let mut s = ParamStore::new(4);
    let cr = ConvRelu::new(&mut s, "cr", 2, 3)?;
    jitter(&mut s, 5);
    c.block("conv-relu", Tier::Block, &s, r(Shape::new(1, 2, 4, 4), 6, -1.0, 1.0), true, all, |cx, x| cr.forward(cx, x))?;

    let mut s = ParamStore::new(7);
    let m = Mlp::new(&mut s, "mlp", 4)?;
    jitter(&mut s, 8);
    c.block("mlp", Tier::Block, &s, r(Shape::new(2, 1, 3, 4), 9, -1.0, 1.0), true, all, |cx, x| m.forward(cx, x))?;

    for block_index in [0, 1] {
        let mut s = ParamStore::new(10);
        let b = SwinBlock::new(&mut s, "swin", 8, 2, 2, block_index)?;
        jitter(&mut s, 11);
        let x = r(Shape::new(1, 8, 4, 4), 12, -1.0, 1.0);
        let probe = Probe::Sample { per_input: 24, seed: 13 };
        c.block(&format!("swin block {block_index}"), Tier::Block, &s, x, true, probe, |cx, x| b.forward(cx, x))?;
    }

    for training in [true, false] {
        let mut s = ParamStore::new(14);
        let m = Mscas::new(&mut s, "mscas", 4)?;
        jitter(&mut s, 15);
        let x = r(Shape::new(2, 4, 4, 4), 16, -1.0, 1.0);
        c.block(&format!("mscas training={training}"), Tier::Block, &s, x, training, all, |cx, x| m.refine_skip(cx, x))?;
    }

    let mut s = ParamStore::new(17);
    let pa = PixelAttention::new(&mut s, "pa", 3)?;
    jitter(&mut s, 18);
    c.block("pixel attention", Tier::Block, &s, r(Shape::new(1, 3, 4, 4), 19, -1.0, 1.0), true, all, |cx, x| {
        let z = log_enhance(cx, x)?;
        pa.forward(cx, z, x)
    })?;
    Ok(c.0)
}

/// Three sampled entries of the input and of every parameter tensor.
pub fn network() -> Result<CaseResult> {
    let cfg = ModelConfig::scaled(Scale::new(1, 16)?)?;
    let mut model = Model::build(&cfg, 20)?;
    jitter(&mut model.store, 21);
    let x = rand_tensor(model.input_shape(2), 22, 0.0, 1.0);
    let mut c = Cases::default();
    let probe = Probe::Sample { per_input: 3, seed: 23 };
    c.block("full network 1/16", Tier::Network, &model.store, x, true, probe, |cx, x| Ok(model.forward(cx, x)?.probs))?;
    Ok(c.0.remove(0))
}
