use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::par;
use crate::tensor::{Element, Shape, Tensor};

pub(crate) struct Conv2d {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    out_c: usize,
}

impl Conv2d {
    fn pointwise(&self) -> bool {
        self.geom.kh == 1 && self.geom.kw == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    pub(super) fn backward<T: Element>(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        let geom = self.geom;
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let oc = self.out_c;
        let x = graph.value(self.x);
        let w = graph.value(self.w);
        let want_x = grads.wants(self.x);
        let want_w = grads.wants(self.w);

        let mut dw = vec![T::zero(); oc * k];
        let mut dx = if want_x { vec![T::zero(); xs.numel()] } else { Vec::new() };
        let mut col = if self.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let mut tmp_w = vec![T::zero(); oc * k];
        let mut dcol = vec![T::zero(); k * p];
        let per_x = xs.numel() / xs.n();

        for n in 0..xs.n() {
            let x_n = &x.data()[n * per_x..(n + 1) * per_x];
            let g_n = &g.data()[n * oc * p..(n + 1) * oc * p];
            let col_n: &[T] = if self.pointwise() {
                x_n
            } else {
                kernels::im2col(x_n, &geom, &mut col);
                &col
            };
            if want_w {
                kernels::gemm_nt(g_n, col_n, &mut tmp_w, oc, p, k);
                for (a, b) in dw.iter_mut().zip(&tmp_w) {
                    *a = *a + *b;
                }
            }
            if want_x {
                let dx_n = &mut dx[n * per_x..(n + 1) * per_x];
                if self.pointwise() {
                    kernels::gemm_tn(w.data(), g_n, dx_n, k, oc, p);
                } else {
                    kernels::gemm_tn(w.data(), g_n, &mut dcol, k, oc, p);
                    kernels::col2im(&dcol, &geom, dx_n);
                }
            }
        }
        if want_x {
            grads.add(self.x, || Tensor::from_vec(xs, dx).expect("conv dx"));
        }
        grads.add(self.w, || Tensor::from_vec(graph.shape(self.w), dw).expect("conv dw"));
        if let Some(b) = self.b {
            grads.add(b, || {
                let mut db = vec![T::zero(); oc];
                for n in 0..xs.n() {
                    for (c, acc) in db.iter_mut().enumerate() {
                        let row = &g.data()[(n * oc + c) * p..(n * oc + c + 1) * p];
                        *acc = *acc + row.iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(graph.shape(b), db).expect("conv db")
            });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

pub(crate) struct Pool {
    x: Var,
    mode: PoolMode,
    window: usize,
    argmax: Vec<u32>,
}

impl Pool {
    pub(super) fn backward<T: Element>(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        let win = self.window;
        let (oh, ow) = (xs.h() / win, xs.w() / win);
        grads.add(self.x, || {
            let mut dx = vec![T::zero(); xs.numel()];
            match self.mode {
                PoolMode::Max => {
                    for (o, &src) in self.argmax.iter().enumerate() {
                        dx[src as usize] = dx[src as usize] + g.data()[o];
                    }
                }
                PoolMode::Avg => {
                    let inv = T::one() / T::from_f64((win * win) as f64);
                    for plane in 0..xs.n() * xs.c() {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data()[(plane * oh + oy) * ow + ox] * inv;
                                for dy in 0..win {
                                    for dxx in 0..win {
                                        let i = plane * xs.plane() + (oy * win + dy) * xs.w() + ox * win + dxx;
                                        dx[i] = dx[i] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_vec(xs, dx).expect("pool dx")
        });
    }
}

/// Fixed (non-learned) depthwise filter: one `k x k` kernel shared by every
/// channel, stride 1, "same" size with edge-replicated padding so a zero-sum
/// kernel maps constant planes to zero everywhere.
pub(crate) struct Depthwise<T> {
    x: Var,
    kernel: Vec<T>,
    k: usize,
}

impl<T: Element> Depthwise<T> {
    pub(super) fn backward(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        grads.add(self.x, || {
            let (h, w) = (xs.h(), xs.w());
            let mut dx = vec![T::zero(); xs.numel()];
            par::for_each_chunk(&mut dx, h * w, |plane, dst| {
                let src = &g.data()[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let gv = src[y * w + xx];
                        for ki in 0..self.k {
                            let iy = clamp_tap(y, ki, self.k, h);
                            for kj in 0..self.k {
                                let ix = clamp_tap(xx, kj, self.k, w);
                                dst[iy * w + ix] = dst[iy * w + ix] + self.kernel[ki * self.k + kj] * gv;
                            }
                        }
                    }
                }
            });
            Tensor::from_vec(xs, dx).expect("dw dx")
        });
    }
}

/// Source row/column for tap `t` of a centred `k`-wide window at `i`,
/// clamped into `0..len`.
fn clamp_tap(i: usize, t: usize, k: usize, len: usize) -> usize {
    (i + t).saturating_sub(k / 2).min(len - 1)
}

fn depthwise_apply<T: Element>(x: &[T], s: Shape, kernel: &[T], k: usize) -> Vec<T> {
    let (h, w) = (s.h(), s.w());
    let mut out = vec![T::zero(); s.numel()];
    par::for_each_chunk(&mut out, h * w, |plane, dst| {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for ki in 0..k {
                    let row = clamp_tap(y, ki, k, h) * w;
                    for kj in 0..k {
                        acc = acc + kernel[ki * k + kj] * src[row + clamp_tap(xx, kj, k, w)];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    });
    out
}

pub(super) fn upsample_backward<T: Element>(graph: &Graph<T>, x: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let xs = graph.shape(x);
    grads.add(x, || {
        let (h, w) = (xs.h(), xs.w());
        let mut dx = vec![T::zero(); xs.numel()];
        par::for_each_chunk(&mut dx, h * w, |plane, dst| {
            let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let r0 = 2 * y * 2 * w + 2 * xx;
                    let r1 = r0 + 2 * w;
                    dst[y * w + xx] = (src[r0] + src[r0 + 1]) + (src[r1] + src[r1 + 1]);
                }
            }
        });
        Tensor::from_vec(xs, dx).expect("upsample dx")
    });
}

impl<T: Element> Graph<T> {
    /// 2-D convolution (cross-correlation). `w` is `(outC, inC, kH, kW)`,
    /// `b` is `(1, 1, 1, outC)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let [oc, ic, kh, kw] = ws.0;
        if xs.c() != ic {
            return Err(Error::dim("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::Validation("conv2d stride must be >= 1".into()));
        }
        if xs.h() + 2 * pad < kh || xs.w() + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != oc {
                return Err(Error::dim("conv2d", format!("bias {bs:?} vs weight {ws:?}")));
            }
        }
        let geom = ConvGeom { channels: ic, h: xs.h(), w: xs.w(), kh, kw, stride, pad };
        let (k, p) = (geom.col_rows(), geom.col_cols());
        let out_shape = Shape::new(xs.n(), oc, geom.out_h(), geom.out_w());
        let op = Conv2d { x, w, b, geom, out_c: oc };

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let per_x = xs.numel() / xs.n();
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut col = if op.pointwise() || self.shape_only { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..xs.n() {
            if self.shape_only {
                break;
            }
            let x_n = &xv[n * per_x..(n + 1) * per_x];
            let col_n: &[T] = if op.pointwise() {
                x_n
            } else {
                kernels::im2col(x_n, &geom, &mut col);
                &col
            };
            let o_n = &mut out[n * oc * p..(n + 1) * oc * p];
            kernels::gemm_nn(wv, col_n, o_n, oc, k, p);
            if let Some(bias) = bias {
                for (c, row) in o_n.chunks_mut(p).enumerate() {
                    for v in row {
                        *v = *v + bias[c];
                    }
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d(op), &inputs))
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode, window: usize) -> Result<Var> {
        let xs = self.shape(x);
        if window == 0 || !xs.h().is_multiple_of(window) || !xs.w().is_multiple_of(window) {
            return Err(Error::dim(
                "pool2d",
                format!("spatial dims of {xs:?} not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (xs.h() / window, xs.w() / window);
        let out_shape = Shape::new(xs.n(), xs.c(), oh, ow);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        let mut argmax = vec![0u32; if mode == PoolMode::Max { out_shape.numel() } else { 0 }];
        let inv = T::one() / T::from_f64((window * window) as f64);
        let planes = if self.shape_only { 0 } else { xs.n() * xs.c() };
        for plane in 0..planes {
            let base = plane * xs.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    let mut acc = T::zero();
                    let mut best = T::neg_infinity();
                    let mut best_i = base + oy * window * xs.w() + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * xs.w() + ox * window + dx;
                            let v = xv[i];
                            acc = acc + v;
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    match mode {
                        PoolMode::Avg => out[o] = acc * inv,
                        PoolMode::Max => {
                            out[o] = xv[best_i];
                            argmax[o] = best_i as u32;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Pool(Pool { x, mode, window, argmax }), &[x]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (h, w) = (xs.h(), xs.w());
        let out_shape = Shape::new(xs.n(), xs.c(), 2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); out_shape.numel()];
        par::for_each_chunk(&mut out, 4 * h * w, |plane, dst| {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        });
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::Upsample2x { x }, &[x]))
    }

    /// Correlate every channel with the same fixed odd-sized kernel.
    pub fn depthwise_fixed(&mut self, x: Var, kernel: &[T], k: usize) -> Result<Var> {
        if k.is_multiple_of(2) || kernel.len() != k * k {
            return Err(Error::Validation(format!("depthwise kernel must be odd k x k, got k={k}, len={}", kernel.len())));
        }
        let xs = self.shape(x);
        let out = if self.shape_only {
            vec![T::zero(); xs.numel()]
        } else {
            depthwise_apply(self.value(x).data(), xs, kernel, k)
        };
        let value = Tensor::from_vec(xs, out)?;
        let op = Depthwise { x, kernel: kernel.to_vec(), k };
        Ok(self.push(value, Op::Depthwise(op), &[x]))
    }
}
