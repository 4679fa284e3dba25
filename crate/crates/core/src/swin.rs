//! Window partitioning, (shifted-)window multi-head self-attention and the
//! Swin block `z' = x + W-MSA(LN(x))`, `z = z' + MLP(LN(z'))`.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::param::{Ctx, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;

/// Window layout for one Swin block over an `H x W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub window: usize,
    pub grid: (usize, usize),
    pub shift: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
            return Err(Error::dim(
                "window_partition",
                format!("{h}x{w} map not divisible by window {window}"),
            ));
        }
        if shift >= window {
            return Err(Error::Validation(format!("shift {shift} must be < window {window}")));
        }
        Ok(WindowGrid { window, grid: (h / window, w / window), shift })
    }

    /// Grid for block `block_index` of a stage: odd blocks are shifted by
    /// half a window. A window larger than the map shrinks to the map and is
    /// never shifted.
    pub fn for_block(h: usize, w: usize, window: usize, block_index: usize) -> Result<Self> {
        let m = window.min(h).min(w);
        let shift = if block_index % 2 == 1 && m < h.max(w) { m / 2 } else { 0 };
        Self::new(h, w, m, shift)
    }

    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn map_size(&self) -> (usize, usize) {
        (self.grid.0 * self.window, self.grid.1 * self.window)
    }

    /// Gather index taking `(N, C, H, W)` to tokens `(N * nW, 1, M*M, C)`,
    /// after a cyclic roll by `(-shift, -shift)`.
    pub fn partition_index(&self, shape: Shape) -> Vec<usize> {
        let (h, w) = (shape.h(), shape.w());
        let (c, m, s) = (shape.c(), self.window, self.shift);
        let (gy, gx) = self.grid;
        let mut idx = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for wy in 0..gy {
                for wx in 0..gx {
                    for ty in 0..m {
                        for tx in 0..m {
                            let y = (wy * m + ty + s) % h;
                            let x = (wx * m + tx + s) % w;
                            for ch in 0..c {
                                idx.push(((n * c + ch) * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn token_shape(&self, shape: Shape) -> Shape {
        Shape::new(shape.n() * self.num_windows(), 1, self.tokens(), shape.c())
    }

    /// Per-window additive mask `(nW, 1, M*M, M*M)` for shifted grids, or
    /// `None` when unshifted. Tokens are labelled by which slab of the rolled
    /// map they sit in; pairs with different labels came from opposite sides
    /// of the wrap-around and are blocked.
    pub fn attention_mask<T: Element>(&self) -> Option<Tensor<T>> {
        if self.shift == 0 {
            return None;
        }
        let (h, w) = self.map_size();
        let (m, s) = (self.window, self.shift);
        let slab = |r: usize, len: usize| {
            if r < len - m {
                0
            } else if r < len - s {
                1
            } else {
                2
            }
        };
        let t = self.tokens();
        let mut mask = Tensor::zeros(Shape::new(self.num_windows(), 1, t, t));
        let neg = T::from_f64(MASK_VALUE);
        for wy in 0..self.grid.0 {
            for wx in 0..self.grid.1 {
                let win = wy * self.grid.1 + wx;
                let labels: Vec<usize> = (0..t)
                    .map(|i| slab(wy * m + i / m, h) * 3 + slab(wx * m + i % m, w))
                    .collect();
                for i in 0..t {
                    for j in 0..t {
                        if labels[i] != labels[j] {
                            mask.set(win, 0, i, j, neg);
                        }
                    }
                }
            }
        }
        Some(mask)
    }
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (o, &i) in index.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

pub fn window_partition<T: Element>(cx: &mut Ctx<'_, T>, x: Var, grid: &WindowGrid) -> Result<Var> {
    let s = cx.graph.shape(x);
    if s.h() != grid.grid.0 * grid.window || s.w() != grid.grid.1 * grid.window {
        return Err(Error::dim("window_partition", format!("{s:?} vs grid {grid:?}")));
    }
    cx.graph.gather(x, grid.partition_index(s), grid.token_shape(s))
}

/// Inverse of [`window_partition`] back to `shape`.
pub fn window_reverse<T: Element>(cx: &mut Ctx<'_, T>, tokens: Var, grid: &WindowGrid, shape: Shape) -> Result<Var> {
    if cx.graph.shape(tokens) != grid.token_shape(shape) {
        return Err(Error::dim("window_reverse", format!("{:?} vs {shape:?}", cx.graph.shape(tokens))));
    }
    cx.graph.gather(tokens, invert(&grid.partition_index(shape)), shape)
}

/// Multi-head self-attention within each window.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl WindowAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Validation(format!("{heads} heads do not divide dim {dim}")));
        }
        Ok(WindowAttention {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `(B, 1, T, D) -> (B, heads, T, d)`
    fn split_index(&self, b: usize, t: usize) -> Vec<usize> {
        let (h, d) = (self.heads, self.head_dim());
        let mut idx = Vec::with_capacity(b * t * self.dim);
        for bi in 0..b {
            for hh in 0..h {
                for ti in 0..t {
                    for j in 0..d {
                        idx.push((bi * t + ti) * self.dim + hh * d + j);
                    }
                }
            }
        }
        idx
    }

    /// Returns the output tokens and the post-softmax attention weights
    /// `(B, heads, T, T)`. `mask` is per window `(nW, 1, T, T)`; batch row `b`
    /// belongs to window `b % nW`.
    pub fn forward_with_weights<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let s = cx.graph.shape(x);
        if s.w() != self.dim || s.c() != 1 {
            return Err(Error::dim("attention", format!("tokens {s:?} vs dim {}", self.dim)));
        }
        let (b, t) = (s.n(), s.h());
        let (h, d) = (self.heads, self.head_dim());
        let head_shape = Shape::new(b, h, t, d);
        let split = self.split_index(b, t);

        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let q = cx.graph.gather(q, split.clone(), head_shape)?;
        let k = cx.graph.gather(k, split.clone(), head_shape)?;
        let v = cx.graph.gather(v, split.clone(), head_shape)?;

        let scores = cx.graph.matmul(q, k, true)?;
        let mut scores = cx.graph.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
        if let Some(mask) = mask {
            let nw = mask.shape().n();
            if mask.shape() != Shape::new(nw, 1, t, t) || b % nw != 0 {
                return Err(Error::dim("attention", format!("mask {:?} vs batch {b}", mask.shape())));
            }
            let plane = t * t;
            let mut full = Vec::with_capacity(b * h * plane);
            for bi in 0..b {
                let src = &mask.data()[(bi % nw) * plane..(bi % nw + 1) * plane];
                for _ in 0..h {
                    full.extend_from_slice(src);
                }
            }
            scores = cx.graph.add_const(scores, &Tensor::from_vec(Shape::new(b, h, t, t), full)?)?;
        }
        let weights = cx.graph.softmax(scores)?;
        let ctx = cx.graph.matmul(weights, v, false)?;
        let merged = cx.graph.gather(ctx, invert(&split), s)?;
        let out = self.out.forward(cx, merged)?;
        Ok((out, weights))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x, mask)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub window: usize,
    pub block_index: usize,
}

impl SwinBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        block_index: usize,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim)?,
            window,
            block_index,
        })
    }

    pub fn grid_for(&self, shape: Shape) -> Result<WindowGrid> {
        WindowGrid::for_block(shape.h(), shape.w(), self.window, self.block_index)
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.graph.shape(x);
        if s.c() != self.attn.dim {
            return Err(Error::dim("swin_block", format!("input {s:?} vs dim {}", self.attn.dim)));
        }
        let grid = self.grid_for(s)?;
        let mask = grid.attention_mask::<T>();
        let tokens = window_partition(cx, x, &grid)?;

        let h = self.norm1.forward(cx, tokens)?;
        let h = self.attn.forward(cx, h, mask.as_ref())?;
        let z_hat = cx.graph.add(tokens, h)?;

        let h = self.norm2.forward(cx, z_hat)?;
        let h = self.mlp.forward(cx, h)?;
        let z = cx.graph.add(z_hat, h)?;
        window_reverse(cx, z, &grid, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn iota(shape: Shape) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.numel()).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn partition_first_window() {
        let store = ParamStore::new(0);
        let mut g = Graph::<f64>::new();
        let mut cx = Ctx::new(&mut g, &store, false);
        let x = cx.graph.input(iota(Shape::new(1, 1, 4, 4)));
        let grid = WindowGrid::new(4, 4, 2, 0).unwrap();
        let t = window_partition(&mut cx, x, &grid).unwrap();
        assert_eq!(g.shape(t), Shape::new(4, 1, 4, 1));
        assert_eq!(&g.value(t).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn grid_rules() {
        assert!(WindowGrid::new(6, 4, 4, 0).is_err());
        let g = WindowGrid::for_block(8, 8, 4, 1).unwrap();
        assert_eq!((g.window, g.shift, g.grid), (4, 2, (2, 2)));
        assert_eq!(WindowGrid::for_block(8, 8, 4, 0).unwrap().shift, 0);
        let small = WindowGrid::for_block(2, 2, 4, 1).unwrap();
        assert_eq!((small.window, small.shift), (2, 0));
    }

    #[test]
    fn unshifted_grid_has_no_mask() {
        let g = WindowGrid::new(8, 8, 4, 0).unwrap();
        assert!(g.attention_mask::<f32>().is_none());
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut store = ParamStore::new(0);
        assert!(WindowAttention::new(&mut store, "a", 10, 4).is_err());
    }
}
