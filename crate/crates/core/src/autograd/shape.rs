use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub(super) fn concat_backward<T: Element>(graph: &Graph<T>, a: Var, b: Var, g: &Tensor<T>, grads: &mut Grads<T>) {
    let (sa, sb) = (graph.shape(a), graph.shape(b));
    let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
    grads.add(a, || {
        let d = (0..sa.n())
            .flat_map(|n| g.data()[n * (pa + pb)..n * (pa + pb) + pa].iter().copied())
            .collect();
        Tensor::from_vec(sa, d).expect("concat da")
    });
    grads.add(b, || {
        let d = (0..sb.n())
            .flat_map(|n| g.data()[n * (pa + pb) + pa..(n + 1) * (pa + pb)].iter().copied())
            .collect();
        Tensor::from_vec(sb, d).expect("concat db")
    });
}

pub(super) fn gather_backward<T: Element>(graph: &Graph<T>, x: Var, index: &[usize], g: &Tensor<T>, grads: &mut Grads<T>) {
    let xs = graph.shape(x);
    grads.add(x, || {
        let mut d = vec![T::zero(); xs.numel()];
        for (o, &src) in index.iter().enumerate() {
            d[src] = d[src] + g.data()[o];
        }
        Tensor::from_vec(xs, d).expect("gather dx")
    });
}

impl<T: Element> Graph<T> {
    /// Channel concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n(), sa.h(), sa.w()) != (sb.n(), sb.h(), sb.w()) {
            return Err(Error::dim("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let (pa, pb) = (sa.c() * sa.plane(), sb.c() * sb.plane());
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut d = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n() {
            d.extend_from_slice(&av[n * pa..(n + 1) * pa]);
            d.extend_from_slice(&bv[n * pb..(n + 1) * pb]);
        }
        let v = Tensor::from_vec(Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w()), d)?;
        Ok(self.push(v, Op::Concat { a, b }, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { x }, &[x]))
    }

    /// `out[i] = x[index[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Shape) -> Result<Var> {
        if index.len() != shape.numel() {
            return Err(Error::dim("gather", format!("{} indices for {shape:?}", index.len())));
        }
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {:?}", self.shape(x))));
        }
        let v = if self.shape_only {
            Tensor::zeros(shape)
        } else {
            Tensor::from_vec(shape, index.iter().map(|&i| xv[i]).collect())?
        };
        Ok(self.push(v, Op::Gather { x, index }, &[x]))
    }
}
