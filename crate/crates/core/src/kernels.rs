//! Dense matrix kernels and the im2col/col2im transforms behind convolution.
//!
//! All matrices are row-major slices. Outputs are parallelised by row; each
//! row accumulates in a fixed order.

use crate::par;
use crate::tensor::Element;

/// `c[m x n] = a[m x k] * b[k x n]`
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk(c, n, |i, row| {
        row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    });
}

/// `c[m x n] = a[m x k] * b[n x k]^T`
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk(c, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            *cv = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c[m x n] = a[k x m]^T * b[k x n]`
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    par::for_each_chunk(c, n, |i, row| {
        row.fill(T::zero());
        for p in 0..k {
            let av = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    });
}

/// Dot product with eight fixed lanes so the compiler can vectorise while the
/// summation order stays deterministic.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold one image `(C, H, W)` into `(C*kh*kw, OH*OW)`.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    debug_assert_eq!(col.len(), g.col_rows() * cols);
    par::for_each_chunk(col, cols, |r, row| {
        let c = r / (g.kh * g.kw);
        let ki = (r / g.kw) % g.kh;
        let kj = r % g.kw;
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..oh {
            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
            let dst = &mut row[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= g.h as isize {
                dst.fill(T::zero());
                continue;
            }
            let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                *d = if ix < 0 || ix >= g.w as isize {
                    T::zero()
                } else {
                    src[ix as usize]
                };
            }
        }
    });
}

/// Fold `(C*kh*kw, OH*OW)` back into `(C, H, W)`, summing overlaps.
pub fn col2im<T: Element>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let kk = g.kh * g.kw;
    par::for_each_chunk(x, g.h * g.w, |c, plane| {
        plane.fill(T::zero());
        for k in 0..kk {
            let (ki, kj) = (k / g.kw, k % g.kw);
            let row = &col[(c * kk + k) * cols..(c * kk + k + 1) * cols];
            for oy in 0..oh {
                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let base = iy as usize * g.w;
                for ox in 0..ow {
                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        plane[base + ix as usize] = plane[base + ix as usize] + row[oy * ow + ox];
                    }
                }
            }
        }
    });
}
