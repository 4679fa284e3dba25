//! Convolutional building blocks and the transformer MLP.

use crate::autograd::{Activation, BnMode, Var};
use crate::error::{Error, Result};
use crate::param::{BufferId, Ctx, Init, ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

pub(crate) fn vector_shape(len: usize) -> Shape {
    Shape::new(1, 1, 1, len)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Stride-1 "same" convolution with bias.
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Self::build(store, name, in_c, out_c, kernel, true)
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Self::build(store, name, in_c, out_c, kernel, false)
    }

    /// Zero weights and bias: the layer starts out emitting zeros.
    pub fn zero_init(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Self::with_init(store, name, in_c, out_c, kernel, true, Init::Zeros)
    }

    fn build(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, kernel: usize, bias: bool) -> Result<Self> {
        let init = Init::KaimingNormal { fan_in: in_c * kernel * kernel };
        Self::with_init(store, name, in_c, out_c, kernel, bias, init)
    }

    fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Shape::new(out_c, in_c, kernel, kernel), init)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), vector_shape(out_c), Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, in_channels: in_c, out_channels: out_c, kernel, pad: kernel / 2 })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.graph.conv2d(x, w, b, 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Shape::new(1, 1, d_out, d_in),
            Init::KaimingNormal { fan_in: d_in },
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), vector_shape(d_out), Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), vector_shape(d), Init::Ones)?,
            beta: store.add(format!("{name}.beta"), vector_shape(d), Init::Zeros)?,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), vector_shape(c), Init::Ones)?,
            beta: store.add(format!("{name}.beta"), vector_shape(c), Init::Zeros)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vector_shape(c)))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vector_shape(c), 1.0))?,
        })
    }

    /// Training mode uses batch statistics and queues a running-stat update;
    /// eval mode uses the stored running statistics (initially mean 0, var 1).
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        if cx.training {
            let (y, stats) = cx.graph.batch_norm(x, g, b, BnMode::Train, BN_EPS)?;
            if let Some(stats) = stats {
                cx.record_bn(self.running_mean, self.running_var, stats);
            }
            Ok(y)
        } else {
            let (mean, var) = (cx.buffer(self.running_mean), cx.buffer(self.running_var));
            let (y, _) = cx.graph.batch_norm(x, g, b, BnMode::Eval { mean: &mean, var: &var }, BN_EPS)?;
            Ok(y)
        }
    }
}

/// `relu(w2 * relu(w1 * x) + shortcut)` where the shortcut is `x` itself or a
/// 1x1 projection when the channel count changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub projection: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        let mid = out_c;
        Ok(ResidualBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_c, mid, 1)?,
            // Zero residual branch: the block starts as relu(shortcut).
            conv2: Conv2d::zero_init(store, &format!("{name}.conv2"), mid, out_c, 3)?,
            projection: if in_c != out_c {
                Some(Conv2d::new(store, &format!("{name}.proj"), in_c, out_c, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let in_c = cx.graph.shape(x).c();
        if in_c != self.conv1.in_channels {
            return Err(Error::dim(
                "residual_block",
                format!("input {:?} but block expects {} channels", cx.graph.shape(x), self.conv1.in_channels),
            ));
        }
        let h = self.conv1.forward(cx, x)?;
        let h = cx.graph.relu(h);
        let t = self.conv2.forward(cx, h)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        let y = cx.graph.add(t, shortcut)?;
        Ok(cx.graph.relu(y))
    }
}

/// 3x3 convolution followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvRelu {
    pub conv: Conv2d,
}

impl ConvRelu {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize) -> Result<Self> {
        Ok(ConvRelu { conv: Conv2d::new(store, name, in_c, out_c, 3)? })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        Ok(cx.graph.relu(y))
    }
}

/// Token-wise `fc2(gelu(fc1(x)))` with hidden width `MLP_RATIO * D`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub hidden: usize,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let hidden = MLP_RATIO * d;
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true)?,
            hidden,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.activate(h, Activation::Gelu);
        self.fc2.forward(cx, h)
    }
}
