use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{el, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Activation {
    pub fn apply<T: Element>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => sigmoid(v),
            Activation::Gelu => {
                let inner = el::<T>(GELU_C) * (v + el::<T>(GELU_A) * v * v * v);
                el::<T>(0.5) * v * (T::one() + inner.tanh())
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Gelu => {
                let (c, a) = (el::<T>(GELU_C), el::<T>(GELU_A));
                let t = (c * (x + a * x * x * x)).tanh();
                let half = el::<T>(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + el::<T>(3.0) * a * x * x)
            }
        }
    }
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(super) fn activate_backward<T: Element>(
    graph: &Graph<T>,
    x: Var,
    kind: Activation,
    y: &Tensor<T>,
    g: &Tensor<T>,
    grads: &mut Grads<T>,
) {
    grads.add(x, || {
        let xv = graph.value(x).data();
        let d: Vec<T> = xv
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
            .collect();
        Tensor::from_vec(y.shape(), d).expect("act dx")
    });
}

pub(super) fn mul_backward<T: Element>(graph: &Graph<T>, a: Var, b: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let prod = |other: Var| {
        let d = g
            .data()
            .iter()
            .zip(graph.value(other).data())
            .map(|(&gv, &o)| gv * o)
            .collect();
        Tensor::from_vec(g.shape(), d).expect("mul grad")
    };
    grads.add(a, || prod(b));
    grads.add(b, || prod(a));
}

pub(super) fn channel_scale_backward<T: Element>(graph: &Graph<T>, x: Var, s: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let xs = graph.shape(x);
    let p = xs.plane();
    let sv = graph.value(s).data();
    grads.add(x, || {
        let d = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| gv * sv[i / p])
            .collect();
        Tensor::from_vec(xs, d).expect("chscale dx")
    });
    grads.add(s, || {
        let xv = graph.value(x).data();
        let d = (0..xs.n() * xs.c())
            .map(|nc| {
                let r = nc * p..(nc + 1) * p;
                g.data()[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum::<T>()
            })
            .collect();
        Tensor::from_vec(graph.shape(s), d).expect("chscale ds")
    });
}

pub(super) fn pixel_gate_backward<T: Element>(graph: &Graph<T>, x: Var, m: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let xs = graph.shape(x);
    let (c, p) = (xs.c(), xs.plane());
    let mv = graph.value(m).data();
    grads.add(x, || {
        let d = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gv)| gv * mv[(i / (c * p)) * p + i % p])
            .collect();
        Tensor::from_vec(xs, d).expect("gate dx")
    });
    grads.add(m, || {
        let xv = graph.value(x).data();
        let mut d = vec![T::zero(); xs.n() * p];
        for n in 0..xs.n() {
            for ch in 0..c {
                let off = (n * c + ch) * p;
                for j in 0..p {
                    d[n * p + j] = d[n * p + j] + g.data()[off + j] * xv[off + j];
                }
            }
        }
        Tensor::from_vec(graph.shape(m), d).expect("gate dm")
    });
}

pub(super) fn gap_backward<T: Element>(graph: &Graph<T>, x: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let xs = graph.shape(x);
    let p = xs.plane();
    grads.add(x, || {
        let inv = T::one() / T::from_f64(p as f64);
        let d = (0..xs.numel()).map(|i| g.data()[i / p] * inv).collect();
        Tensor::from_vec(xs, d).expect("gap dx")
    });
}

impl<T: Element> Graph<T> {
    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        let value = if self.shape_only {
            Tensor::zeros(self.shape(x))
        } else {
            self.value(x).map(|v| kind.apply(v))
        };
        self.push(value, Op::Activate { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let s = self.expect_same_shape(op, a, b)?;
        if self.shape_only {
            return Ok(Tensor::zeros(s));
        }
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(s, d)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x).map(|e| e * k);
        self.push(v, Op::Scale { x, k }, &[x])
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let s = self.shape(x);
        if c.shape() != s {
            return Err(Error::dim("add_const", format!("{s:?} vs {:?}", c.shape())));
        }
        let d = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let v = Tensor::from_vec(s, d)?;
        Ok(self.push(v, Op::AddConst { x }, &[x]))
    }

    /// `x (N,C,H,W) * s (N,C,1,1)` broadcast over space.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss != Shape::new(xs.n(), xs.c(), 1, 1) {
            return Err(Error::dim("channel_scale", format!("{xs:?} vs scale {ss:?}")));
        }
        if self.shape_only {
            return Ok(self.push(Tensor::zeros(xs), Op::ChannelScale { x, s }, &[x, s]));
        }
        let p = xs.plane();
        let sv = self.value(s).data();
        let d = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sv[i / p]).collect();
        let v = Tensor::from_vec(xs, d)?;
        Ok(self.push(v, Op::ChannelScale { x, s }, &[x, s]))
    }

    /// `x (N,C,H,W) * m (N,1,H,W)` broadcast over channels.
    pub fn pixel_gate(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(m));
        if ms != Shape::new(xs.n(), 1, xs.h(), xs.w()) {
            return Err(Error::dim("pixel_gate", format!("{xs:?} vs map {ms:?}")));
        }
        if self.shape_only {
            return Ok(self.push(Tensor::zeros(xs), Op::PixelGate { x, m }, &[x, m]));
        }
        let (c, p) = (xs.c(), xs.plane());
        let mv = self.value(m).data();
        let d = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[(i / (c * p)) * p + i % p])
            .collect();
        let v = Tensor::from_vec(xs, d)?;
        Ok(self.push(v, Op::PixelGate { x, m }, &[x, m]))
    }

    /// Global average pool: `(N,C,H,W) -> (N,C,1,1)`.
    pub fn gap(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let p = xs.plane();
        let inv = T::one() / T::from_f64(p as f64);
        let d = self.value(x).data().chunks(p).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor::from_vec(Shape::new(xs.n(), xs.c(), 1, 1), d).expect("gap shape");
        self.push(v, Op::Gap { x }, &[x])
    }
}
