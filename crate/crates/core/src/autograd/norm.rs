use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Element, Shape, Tensor};

pub(crate) struct LayerNorm<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

/// Shared backward for normalisations: given `dxhat` and `xhat` for one group
/// of `m` elements with inverse std `rstd`, returns `dx`.
#[inline]
fn normalize_backward<T: Element>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let m = T::from_f64(dxhat.len() as f64);
    let mean_d = dxhat.iter().copied().sum::<T>() / m;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / m;
    for ((o, &d), &xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd * (d - mean_d - xh * mean_dx);
    }
}

impl<T: Element> LayerNorm<T> {
    pub(super) fn backward(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        let d = xs.w();
        let gamma = graph.value(self.gamma).data();
        grads.add(self.x, || {
            let mut dx = vec![T::zero(); xs.numel()];
            par::for_each_chunk(&mut dx, d, |r, out| {
                let gr = &g.data()[r * d..(r + 1) * d];
                let dxhat: Vec<T> = gr.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                normalize_backward(&dxhat, &self.xhat[r * d..(r + 1) * d], self.rstd[r], out);
            });
            Tensor::from_vec(xs, dx).expect("ln dx")
        });
        grads.add(self.gamma, || {
            let mut dg = vec![T::zero(); d];
            for (gr, xr) in g.data().chunks(d).zip(self.xhat.chunks(d)) {
                for ((acc, &gv), &xv) in dg.iter_mut().zip(gr).zip(xr) {
                    *acc = *acc + gv * xv;
                }
            }
            Tensor::from_vec(graph.shape(self.gamma), dg).expect("ln dgamma")
        });
        grads.add(self.beta, || {
            let mut db = vec![T::zero(); d];
            for gr in g.data().chunks(d) {
                for (acc, &gv) in db.iter_mut().zip(gr) {
                    *acc = *acc + gv;
                }
            }
            Tensor::from_vec(graph.shape(self.beta), db).expect("ln dbeta")
        });
    }
}

/// Per-channel batch statistics from a training-mode batch norm; the variance
/// is unbiased, for updating running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

pub(crate) struct BatchNorm<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    invstd: Vec<T>,
    training: bool,
}

/// Iterate `(n, c)` planes of channel `c`.
fn channel_planes<T: Element>(data: &[T], s: Shape, c: usize) -> impl Iterator<Item = &[T]> {
    let p = s.plane();
    (0..s.n()).map(move |n| &data[(n * s.c() + c) * p..(n * s.c() + c + 1) * p])
}

impl<T: Element> BatchNorm<T> {
    pub(super) fn backward(&self, graph: &Graph<T>, g: &Tensor<T>, grads: &mut Grads<T>) {
        let xs = graph.shape(self.x);
        let (c_n, p) = (xs.c(), xs.plane());
        let gamma = graph.value(self.gamma).data();
        let gather = |data: &[T], c: usize| -> Vec<T> {
            channel_planes(data, xs, c).flat_map(|s| s.iter().copied()).collect()
        };
        grads.add(self.x, || {
            let per_channel: Vec<Vec<T>> = par::map_range(c_n, |c| {
                let gc = gather(g.data(), c);
                let dxhat: Vec<T> = gc.iter().map(|&v| v * gamma[c]).collect();
                if self.training {
                    let xh = gather(&self.xhat, c);
                    let mut dx = vec![T::zero(); gc.len()];
                    normalize_backward(&dxhat, &xh, self.invstd[c], &mut dx);
                    dx
                } else {
                    dxhat.iter().map(|&v| v * self.invstd[c]).collect()
                }
            });
            let mut dx = vec![T::zero(); xs.numel()];
            for (c, vals) in per_channel.iter().enumerate() {
                for n in 0..xs.n() {
                    let off = (n * c_n + c) * p;
                    dx[off..off + p].copy_from_slice(&vals[n * p..(n + 1) * p]);
                }
            }
            Tensor::from_vec(xs, dx).expect("bn dx")
        });
        grads.add(self.gamma, || {
            let dg: Vec<T> = (0..c_n)
                .map(|c| {
                    channel_planes(g.data(), xs, c)
                        .zip(channel_planes(&self.xhat, xs, c))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                        .fold(T::zero(), |a, b| a + b)
                })
                .collect();
            Tensor::from_vec(graph.shape(self.gamma), dg).expect("bn dgamma")
        });
        grads.add(self.beta, || {
            let db: Vec<T> = (0..c_n)
                .map(|c| {
                    channel_planes(g.data(), xs, c)
                        .map(|gp| gp.iter().copied().sum::<T>())
                        .fold(T::zero(), |a, b| a + b)
                })
                .collect();
            Tensor::from_vec(graph.shape(self.beta), db).expect("bn dbeta")
        });
    }
}

impl<T: Element> Graph<T> {
    /// Normalise each row of the last axis, then apply the affine `gamma`, `beta`
    /// (both `(1, 1, 1, D)`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        let d = xs.w();
        for p in [gamma, beta] {
            if self.shape(p).numel() != d {
                return Err(Error::dim("layer_norm", format!("affine {:?} vs input {xs:?}", self.shape(p))));
            }
        }
        let rows = xs.numel() / d;
        if self.shape_only {
            let op = LayerNorm { x, gamma, beta, xhat: vec![T::zero(); xs.numel()], rstd: vec![T::zero(); rows] };
            return Ok(self.push(Tensor::zeros(xs), Op::LayerNorm(op), &[x, gamma, beta]));
        }
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let stats: Vec<(T, T)> = par::map_range(rows, |r| {
            let row = &xv[r * d..(r + 1) * d];
            let n = T::from_f64(d as f64);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + eps).sqrt())
        });
        let mut xhat = vec![T::zero(); xs.numel()];
        for (r, &(mean, rstd)) in stats.iter().enumerate() {
            for j in 0..d {
                xhat[r * d + j] = (xv[r * d + j] - mean) * rstd;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % d] + bv[i % d])
            .collect();
        let rstd = stats.into_iter().map(|s| s.1).collect();
        let value = Tensor::from_vec(xs, out)?;
        let op = LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.push(value, Op::LayerNorm(op), &[x, gamma, beta]))
    }

    /// Per-channel batch normalisation over `(N, H, W)`. In training mode the
    /// batch statistics are returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x);
        let c_n = xs.c();
        for p in [gamma, beta] {
            if self.shape(p).numel() != c_n {
                return Err(Error::dim("batch_norm", format!("affine {:?} vs input {xs:?}", self.shape(p))));
            }
        }
        if self.shape_only {
            let training = matches!(mode, BnMode::Train);
            let stats = training.then(|| BatchStats { mean: vec![T::zero(); c_n], var: vec![T::one(); c_n] });
            let op = BatchNorm { x, gamma, beta, xhat: vec![T::zero(); xs.numel()], invstd: vec![T::one(); c_n], training };
            return Ok((self.push(Tensor::zeros(xs), Op::BatchNorm(op), &[x, gamma, beta]), stats));
        }
        let eps = T::from_f64(eps);
        let xv = self.value(x).data();
        let m = xs.n() * xs.plane();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mf = T::from_f64(m as f64);
                let mean: Vec<T> = (0..c_n)
                    .map(|c| {
                        channel_planes(xv, xs, c)
                            .map(|p| p.iter().copied().sum::<T>())
                            .fold(T::zero(), |a, b| a + b)
                            / mf
                    })
                    .collect();
                let ss: Vec<T> = (0..c_n)
                    .map(|c| {
                        channel_planes(xv, xs, c)
                            .map(|p| p.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>())
                            .fold(T::zero(), |a, b| a + b)
                    })
                    .collect();
                let var: Vec<T> = ss.iter().map(|&s| s / mf).collect();
                let unbiased = ss
                    .iter()
                    .map(|&s| if m > 1 { s / T::from_f64((m - 1) as f64) } else { s })
                    .collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c_n || var.len() != c_n {
                    return Err(Error::dim("batch_norm", "running stats length vs channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let p = xs.plane();
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut out = vec![T::zero(); xs.numel()];
        for i in 0..xs.numel() {
            let c = (i / p) % c_n;
            xhat[i] = (xv[i] - mean[c]) * invstd[c];
            out[i] = xhat[i] * gv[c] + bv[c];
        }
        let value = Tensor::from_vec(xs, out)?;
        let training = stats.is_some();
        let op = BatchNorm { x, gamma, beta, xhat, invstd, training };
        Ok((self.push(value, Op::BatchNorm(op), &[x, gamma, beta]), stats))
    }
}
