//! Slice-level numeric kernels behind the differentiable ops.

use crate::scalar::Scalar;

/// `out[m,n] = op(a) · op(b)` where `op` optionally transposes.
///
/// Storage: `a` is `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = T::zero());
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let s = a[i * k + p];
                    if s == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += s * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let s = a[p * m + i];
                    if s == T::zero() {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += s * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
    }
}

/// Static geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.k_h, self.k_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h(), self.out_w()]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.col_cols()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    for c in 0..g.in_ch {
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    for c in 0..g.in_ch {
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        dx[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = x ⋆ w` (no bias).
pub(crate) fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut y = vec![T::zero(); g.batch * g.out_len()];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
        matmul(
            w,
            &col,
            &mut y[n * g.out_len()..(n + 1) * g.out_len()],
            g.out_ch,
            rows,
            cols,
            false,
            false,
        );
    }
    y
}

/// Adjoint of `conv2d` with respect to its input.
pub(crate) fn conv2d_input_grad<T: Scalar>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    for n in 0..g.batch {
        matmul(
            w,
            &gy[n * g.out_len()..(n + 1) * g.out_len()],
            &mut dcol,
            rows,
            g.out_ch,
            cols,
            true,
            false,
        );
        col2im_add(g, &dcol, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    dx
}

/// Adjoint of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], gy: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut part = vec![T::zero(); g.out_ch * rows];
    let mut dw = vec![T::zero(); g.out_ch * rows];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
        matmul(
            &gy[n * g.out_len()..(n + 1) * g.out_len()],
            &col,
            &mut part,
            g.out_ch,
            cols,
            rows,
            false,
            true,
        );
        for (d, &p) in dw.iter_mut().zip(&part) {
            *d += p;
        }
    }
    dw
}

/// Non-overlapping `k×k` average pooling over `[planes, h, w]`.
pub(crate) fn avgpool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).expect("pool size");
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc += src[(oy * k + i) * w + ox * k + j];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

/// Adjoint of `avgpool`: spreads each pooled gradient evenly over its window.
pub(crate) fn avgpool_grad<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).expect("pool size");
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * inv;
                for i in 0..k {
                    for j in 0..k {
                        dst[(oy * k + i) * w + ox * k + j] = v;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of a `[rows, cols]` matrix.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

/// Mean cross-entropy of row-wise logits against integer labels.
pub(crate) fn cross_entropy<T: Scalar>(x: &[T], labels: &[usize], cols: usize) -> T {
    let rows = labels.len();
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let src = &x[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&s| (s - max).exp()).sum::<T>().ln() + max;
        total += lse - src[y];
    }
    total / T::from_usize(rows).expect("rows")
}

/// Adds `b[c]` to every element of channel `c` in an `[outer, channels, inner]` layout.
pub(crate) fn broadcast_channels<T: Scalar>(b: &[T], outer: usize, inner: usize) -> Vec<T> {
    let ch = b.len();
    let mut out = Vec::with_capacity(outer * ch * inner);
    for _ in 0..outer {
        for &v in b {
            out.extend(std::iter::repeat_n(v, inner));
        }
    }
    out
}

/// Sums an `[outer, channels, inner]` layout down to `[channels]`.
pub(crate) fn sum_channels<T: Scalar>(x: &[T], outer: usize, ch: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ch];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (o * ch + c) * inner;
            for &v in &x[base..base + inner] {
                *acc += v;
            }
        }
    }
    out
}
