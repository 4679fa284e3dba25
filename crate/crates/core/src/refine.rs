//! Feature refinement: the Laplacian-of-Gaussian regional operator, the
//! multi-scale channel attention and squeezing (MSCAS) block and pixel
//! attention.

use std::sync::OnceLock;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::param::{Ctx, ParamStore};
use crate::tensor::{Element, Shape};

pub const LOG_SIZE: usize = 5;
pub const LOG_SIGMA: f64 = 1.0;

/// 5x5 Laplacian-of-Gaussian (sigma 1), shifted so its entries sum to zero.
pub fn log_kernel() -> &'static [f64; LOG_SIZE * LOG_SIZE] {
    static KERNEL: OnceLock<[f64; LOG_SIZE * LOG_SIZE]> = OnceLock::new();
    KERNEL.get_or_init(|| {
        let r = (LOG_SIZE / 2) as f64;
        let s2 = LOG_SIGMA * LOG_SIGMA;
        let mut k = [0.0; LOG_SIZE * LOG_SIZE];
        for (i, v) in k.iter_mut().enumerate() {
            let y = (i / LOG_SIZE) as f64 - r;
            let x = (i % LOG_SIZE) as f64 - r;
            let q = (x * x + y * y) / (2.0 * s2);
            *v = -1.0 / (std::f64::consts::PI * s2 * s2) * (1.0 - q) * (-q).exp();
        }
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        for v in k.iter_mut() {
            *v -= mean;
        }
        k
    })
}

fn log_kernel_as<T: Element>() -> Vec<T> {
    log_kernel().iter().map(|&v| T::from_f64(v)).collect()
}

/// Depthwise LoG response (the pure edge/blob stream).
pub fn log_response<T: Element>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    cx.graph.depthwise_fixed(x, &log_kernel_as::<T>(), LOG_SIZE)
}

/// `x + LoG(x)`: accentuates regional structure without replacing features.
pub fn log_enhance<T: Element>(cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let r = log_response(cx, x)?;
    cx.graph.add(x, r)
}

/// Channel attention over a boundary stream and a global stream.
///
/// `X = concat(x_b, x_g)` is squeezed back to `C` channels by a 1x1 conv and
/// batch norm; its global average feeds a fully connected layer whose softmax
/// gives one weight per channel. The output is the squeezed map with each
/// channel multiplied by `C * s_c`, so uniform weights leave it unchanged.
#[derive(Clone, Debug)]
pub struct Mscas {
    pub channels: usize,
    pub squeeze: Conv2d,
    pub bn: BatchNorm2d,
    pub fc: Linear,
}

pub struct MscasOutput {
    pub refined: Var,
    /// The squeezed map before channel reweighting.
    pub squeezed: Var,
    /// Softmax weights, `(N, 1, 1, C)`.
    pub weights: Var,
}

impl Mscas {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Mscas {
            channels,
            squeeze: Conv2d::new(store, &format!("{name}.squeeze"), 2 * channels, channels, 1)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels)?,
            fc: Linear::new(store, &format!("{name}.fc"), channels, channels, true)?,
        })
    }

    pub fn forward_parts<T: Element>(&self, cx: &mut Ctx<'_, T>, x_g: Var, x_b: Var) -> Result<MscasOutput> {
        let s = cx.graph.expect_same_shape("mscas", x_g, x_b)?;
        if s.c() != self.channels {
            return Err(Error::dim("mscas", format!("streams {s:?} vs {} channels", self.channels)));
        }
        let (n, c) = (s.n(), s.c());
        let x = cx.graph.concat_channels(x_b, x_g)?;
        let u = self.squeeze.forward(cx, x)?;
        let u = self.bn.forward(cx, u)?;
        let z = cx.graph.gap(u);
        let z = cx.graph.reshape(z, Shape::new(n, 1, 1, c))?;
        let p = self.fc.forward(cx, z)?;
        let weights = cx.graph.softmax(p)?;
        let w = cx.graph.reshape(weights, Shape::new(n, c, 1, 1))?;
        let w = cx.graph.scale(w, T::from_f64(c as f64));
        let refined = cx.graph.channel_scale(u, w)?;
        Ok(MscasOutput { refined, squeezed: u, weights })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x_g: Var, x_b: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, x_g, x_b)?.refined)
    }

    /// Refine an encoder skip: the global stream is the map itself and the
    /// boundary stream its LoG response.
    pub fn refine_skip<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let boundary = log_response(cx, x)?;
        self.forward(cx, x, boundary)
    }
}

/// Spatial gate: `h = relu(M1 z + M2 s + b1)`, `M_p = sigmoid(g h + b2)`,
/// output `M_p * z` broadcast over channels.
#[derive(Clone, Debug)]
pub struct PixelAttention {
    pub m1: Conv2d,
    pub m2: Conv2d,
    pub g: Conv2d,
}

pub struct PixelAttentionOutput {
    pub out: Var,
    /// `(N, 1, H, W)` attention map in `[0, 1]`.
    pub map: Var,
}

impl PixelAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(PixelAttention {
            m1: Conv2d::new(store, &format!("{name}.m1"), channels, channels, 1)?,
            m2: Conv2d::without_bias(store, &format!("{name}.m2"), channels, channels, 1)?,
            // A zero gate starts at sigmoid(0) = 0.5 everywhere instead of
            // saturating on the large unnormalised decoder activations.
            g: Conv2d::zero_init(store, &format!("{name}.g"), channels, 1, 1)?,
        })
    }

    pub fn forward_parts<T: Element>(&self, cx: &mut Ctx<'_, T>, z_enh: Var, s_mn: Var) -> Result<PixelAttentionOutput> {
        cx.graph.expect_same_shape("pixel_attention", z_enh, s_mn)?;
        let a = self.m1.forward(cx, z_enh)?;
        let b = self.m2.forward(cx, s_mn)?;
        let h = cx.graph.add(a, b)?;
        let h = cx.graph.relu(h);
        let logits = self.g.forward(cx, h)?;
        let map = cx.graph.sigmoid(logits);
        let out = cx.graph.pixel_gate(z_enh, map)?;
        Ok(PixelAttentionOutput { out, map })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, z_enh: Var, s_mn: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, z_enh, s_mn)?.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    #[test]
    fn kernel_is_zero_sum_with_negative_centre() {
        let k = log_kernel();
        assert!(k.iter().sum::<f64>().abs() < 1e-12);
        assert!(k[12] < 0.0);
        assert!(k[12] < k[0]);
    }

    #[test]
    fn log_enhance_keeps_shape() {
        let store = ParamStore::new(0);
        let mut g = Graph::<f32>::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let x = cx.graph.input(Tensor::zeros(Shape::new(1, 4, 16, 12)));
        let y = log_enhance(&mut cx, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(1, 4, 16, 12));
    }

    #[test]
    fn mscas_stream_mismatch() {
        let mut store = ParamStore::new(0);
        let m = Mscas::new(&mut store, "m", 4).unwrap();
        let mut g = Graph::<f32>::new();
        let mut cx = Ctx::new(&mut g, &store, true);
        let a = cx.graph.input(Tensor::zeros(Shape::new(1, 4, 4, 4)));
        let b = cx.graph.input(Tensor::zeros(Shape::new(1, 4, 2, 4)));
        assert!(m.forward(&mut cx, a, b).is_err());
    }
}
