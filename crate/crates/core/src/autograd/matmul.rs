use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::par;
use crate::tensor::{Element, Shape, Tensor};

pub(crate) struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl Linear {
    pub(super) fn backward<T: Element>(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        let ws = graph.shape(self.w);
        let (dout, din) = (ws.h(), ws.w());
        let rows = xs.numel() / din;
        grads.add(self.x, || {
            let mut dx = vec![T::zero(); xs.numel()];
            kernels::gemm_nn(g.data(), graph.value(self.w).data(), &mut dx, rows, dout, din);
            Tensor::from_vec(xs, dx).expect("linear dx")
        });
        grads.add(self.w, || {
            let mut dw = vec![T::zero(); dout * din];
            kernels::gemm_tn(g.data(), graph.value(self.x).data(), &mut dw, dout, rows, din);
            Tensor::from_vec(ws, dw).expect("linear dw")
        });
        if let Some(b) = self.b {
            grads.add(b, || {
                let mut db = vec![T::zero(); dout];
                for row in g.data().chunks(dout) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                Tensor::from_vec(graph.shape(b), db).expect("linear db")
            });
        }
    }
}

/// Batched matrix product over the `(n, c)` axes.
pub(crate) struct MatMul {
    a: Var,
    b: Var,
    trans_b: bool,
}

struct MmDims {
    t: usize,
    k: usize,
    s: usize,
}

impl MatMul {
    fn dims(sa: Shape, sb: Shape, trans_b: bool) -> Option<MmDims> {
        let batches = sa.n() * sa.c();
        if sb.n() * sb.c() != batches {
            return None;
        }
        let (t, k) = (sa.h(), sa.w());
        let s = if trans_b {
            (sb.w() == k).then_some(sb.h())?
        } else {
            (sb.h() == k).then_some(sb.w())?
        };
        Some(MmDims { t, k, s })
    }

    pub(super) fn backward<T: Element>(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let (sa, sb) = (graph.shape(self.a), graph.shape(self.b));
        let MmDims { t, k, s, .. } = Self::dims(sa, sb, self.trans_b).expect("checked in forward");
        let (av, bv) = (graph.value(self.a).data(), graph.value(self.b).data());
        let gv = g.data();
        let trans_b = self.trans_b;
        grads.add(self.a, || {
            let mut da = vec![T::zero(); sa.numel()];
            par::for_each_chunk(&mut da, t * k, |i, out| {
                let gi = &gv[i * t * s..(i + 1) * t * s];
                let bi = &bv[i * k * s..(i + 1) * k * s];
                if trans_b {
                    // a.b^T: da = g . b
                    small_nn(gi, bi, out, t, s, k);
                } else {
                    // a.b: da = g . b^T
                    small_nt(gi, bi, out, t, s, k);
                }
            });
            Tensor::from_vec(sa, da).expect("matmul da")
        });
        grads.add(self.b, || {
            let mut db = vec![T::zero(); sb.numel()];
            par::for_each_chunk(&mut db, k * s, |i, out| {
                let gi = &gv[i * t * s..(i + 1) * t * s];
                let ai = &av[i * t * k..(i + 1) * t * k];
                if trans_b {
                    // db = g^T . a  (s x k)
                    small_tn(gi, ai, out, s, t, k);
                } else {
                    // db = a^T . g  (k x s)
                    small_tn(ai, gi, out, k, t, s);
                }
            });
            Tensor::from_vec(sb, db).expect("matmul db")
        });
    }
}

// Sequential kernels for the many small per-window products.
fn small_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        row.fill(T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn small_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = kernels::dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

fn small_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.fill(T::zero());
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub(super) fn softmax_backward<T: Element>(x: Var, y: &Tensor<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
    let k = y.shape().w();
    grads.add(x, || {
        let mut dx = vec![T::zero(); y.numel()];
        par::for_each_chunk(&mut dx, k, |r, out| {
            let yr = &y.data()[r * k..(r + 1) * k];
            let gr = &g.data()[r * k..(r + 1) * k];
            let dotp = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
            for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - dotp);
            }
        });
        Tensor::from_vec(y.shape(), dx).expect("softmax dx")
    });
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Element>(row: &mut [T]) {
    debug_assert!(row.iter().all(|v| !v.is_nan()), "NaN entering softmax");
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

impl<T: Element> Graph<T> {
    /// `y = x . W^T + b` over the last axis. `w` is `(1, 1, Dout, Din)`,
    /// `b` is `(1, 1, 1, Dout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (dout, din) = (ws.h(), ws.w());
        if ws.n() * ws.c() != 1 || xs.w() != din {
            return Err(Error::dim("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b).numel() != dout {
                return Err(Error::dim("linear", format!("bias {:?} vs weight {ws:?}", self.shape(b))));
            }
        }
        let rows = xs.numel() / din;
        let out_shape = Shape::new(xs.n(), xs.c(), xs.h(), dout);
        let mut out = vec![T::zero(); out_shape.numel()];
        if !self.shape_only {
            kernels::gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, &v) in row.iter_mut().zip(bv) {
                    *o = *o + v;
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear(Linear { x, w, b }), &inputs))
    }

    /// Batched `a . b` (or `a . b^T` when `trans_b`) over the `(n, c)` axes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let MmDims { t, k, s, .. } = MatMul::dims(sa, sb, trans_b)
            .ok_or_else(|| Error::dim("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")))?;
        let out_shape = Shape::new(sa.n(), sa.c(), t, s);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); out_shape.numel()];
        let chunk = if self.shape_only { 0 } else { t * s };
        par::for_each_chunk(&mut out, chunk, |i, o| {
            let ai = &av[i * t * k..(i + 1) * t * k];
            let bi = &bv[i * k * s..(i + 1) * k * s];
            if trans_b {
                small_nt(ai, bi, o, t, k, s);
            } else {
                small_nn(ai, bi, o, t, k, s);
            }
        });
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, Op::MatMul(MatMul { a, b, trans_b }), &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        par::for_each_chunk(&mut out, xs.w(), |_, row| softmax_row(row));
        let value = Tensor::from_vec(xs, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.input(Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap())
    }

    #[test]
    fn linear_eq11_arithmetic() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[1.0, 2.0]);
        let w = g.input(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap());
        let b = row(&mut g, &[0.5]);
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
    }

    #[test]
    fn linear_identity() {
        let mut g = Graph::<f32>::new();
        let xt = Tensor::from_vec(Shape::new(2, 1, 3, 3), (0..18).map(|v| v as f32 - 4.0).collect()).unwrap();
        let x = g.input(xt.clone());
        let mut eye = Tensor::zeros(Shape::new(1, 1, 3, 3));
        for i in 0..3 {
            eye.set(0, 0, i, i, 1.0);
        }
        let w = g.input(eye);
        let b = g.input(Tensor::zeros(Shape::new(1, 1, 1, 3)));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = row(&mut g, &[0.0, 0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = row(&mut g, &[0.0, 3f64.ln()]);
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_bitwise() {
        let base = [0.3f32, -1.2, 2.5, 0.0];
        let mut a = base;
        let mut b = base.map(|v| v + 7.0);
        softmax_row(&mut a);
        softmax_row(&mut b);
        // Max-subtraction makes the exponent arguments identical up to rounding
        // of the shifted inputs.
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        let s: f32 = a.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matmul_small_case() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let ab = g.matmul(a, b, false).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let abt = g.matmul(a, b, true).unwrap();
        assert_eq!(g.value(abt).data(), &[17.0, 23.0, 39.0, 53.0]);
    }
}
