//! Forward and backward kernels for the layer primitives. These work on raw
//! row-major slices; [`super::tape`] wraps them with shape checks and
//! gradient bookkeeping.

use super::par;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Samples per work item in batched kernels. Fixed so that reductions over
/// the batch happen in the same order regardless of thread count.
pub const BATCH_CHUNK: usize = 4;

/// Row-major matrix view: `(data, rows, cols, transposed)`.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            trans: !self.trans,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + op(a) * op(b)`, `out` is `m x n` row-major.
pub fn gemm<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for o in out.iter_mut() {
            *o = *o * beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: sizes and strides were checked above and describe in-bounds
    // row-major (or transposed) layouts; `out` is exclusively borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(Mat::new(a, m, k), Mat::new(b, k, n), T::zero(), &mut out);
    out
}

/// `y = x * w^T + bias` for `x: [batch, inp]`, `w: [out, inp]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    inp: usize,
    w: &[T],
    bias: &[T],
    out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    gemm(
        Mat::new(x, batch, inp),
        Mat::new(w, out, inp).t(),
        T::one(),
        &mut y,
    );
    y
}

/// Returns `(dx, dw, db)` for [`linear_forward`]; `dx` only when `need_dx`.
#[allow(clippy::type_complexity)]
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    batch: usize,
    inp: usize,
    w: &[T],
    out: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * inp];
        gemm(
            Mat::new(dy, batch, out),
            Mat::new(w, out, inp),
            T::zero(),
            &mut dx,
        );
        dx
    });
    let mut dw = vec![T::zero(); out * inp];
    gemm(
        Mat::new(dy, batch, out).t(),
        Mat::new(x, batch, inp),
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); out];
    for row in dy.chunks(out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Dimension("conv stride must be >= 1".into()));
        }
        if self.k == 0 || self.k > self.h + 2 * self.pad || self.k > self.w + 2 * self.pad {
            return Err(Error::Dimension(format!(
                "kernel {} does not fit input {}x{} with padding {}",
                self.k, self.h, self.w, self.pad
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.col_cols()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut r = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        row[oy * ow + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                plane[iy as usize * g.w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut r = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Cross-correlation (no kernel flip). `x: [batch, c_in, h, w]`,
/// `f: [c_out, c_in, k, k]`, `bias: [c_out]`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], batch: usize, f: &[T], bias: &[T]) -> Vec<T> {
    let out_len = g.out_len();
    let mut y = vec![T::zero(); batch * out_len];
    let ohw = g.col_cols();
    par::for_each_chunk_mut(&mut y, out_len * BATCH_CHUNK, |ci, ychunk| {
        let mut cols = vec![T::zero(); g.col_rows() * ohw];
        for (s, ys) in ychunk.chunks_mut(out_len).enumerate() {
            let n = ci * BATCH_CHUNK + s;
            im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut cols);
            for (o, row) in ys.chunks_mut(ohw).enumerate() {
                row.fill(bias[o]);
            }
            gemm(
                Mat::new(f, g.c_out, g.col_rows()),
                Mat::new(&cols, g.col_rows(), ohw),
                T::one(),
                ys,
            );
        }
    });
    y
}

/// Returns `(dx, df, dbias)` for [`conv2d_forward`]; `dx` only when `need_dx`.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    dy: &[T],
    x: &[T],
    batch: usize,
    f: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (in_len, out_len, ohw, crows) = (g.in_len(), g.out_len(), g.col_cols(), g.col_rows());
    let partial_df = par::map_ranges(batch, BATCH_CHUNK, |range| {
        let mut cols = vec![T::zero(); crows * ohw];
        let mut df = vec![T::zero(); g.c_out * crows];
        for n in range {
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(
                Mat::new(&dy[n * out_len..(n + 1) * out_len], g.c_out, ohw),
                Mat::new(&cols, crows, ohw).t(),
                T::one(),
                &mut df,
            );
        }
        df
    });
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * in_len];
        par::for_each_chunk_mut(&mut dx, in_len, |n, dxs| {
            let mut dcols = vec![T::zero(); crows * ohw];
            gemm(
                Mat::new(f, g.c_out, crows).t(),
                Mat::new(&dy[n * out_len..(n + 1) * out_len], g.c_out, ohw),
                T::zero(),
                &mut dcols,
            );
            col2im(g, &dcols, dxs);
        });
        dx
    });
    let mut df = vec![T::zero(); g.c_out * crows];
    for p in &partial_df {
        for (a, &b) in df.iter_mut().zip(p) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..batch {
        for (o, d) in db.iter_mut().enumerate() {
            let s = n * out_len + o * ohw;
            *d += dy[s..s + ohw].iter().copied().sum::<T>();
        }
    }
    (dx, df, db)
}

/// Max pooling over `[planes, h, w]` (planes = batch * channels). Returns the
/// pooled values and, for each output, the flat input index it came from.
/// Ties go to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(Vec<T>, Vec<usize>, usize, usize)> {
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::Dimension(format!(
            "pool window {k} (stride {stride}) does not fit {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y[o] = x[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg, oh, ow))
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Mean cross-entropy of `softmax(logits)` against `labels`. Returns the loss
/// and the softmax probabilities (kept for the backward pass).
pub fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    batch: usize,
    classes: usize,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
    }
    let mut probs = vec![T::zero(); batch * classes];
    let mut loss = T::zero();
    for (n, (row, prow)) in logits.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &l) in prow.iter_mut().zip(row) {
            *p = (l - max).exp();
            z += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / z;
        }
        loss += z.ln() - (row[labels[n]] - max);
    }
    Ok((loss / T::from_f64(batch as f64), probs))
}

pub fn softmax_xent_backward<T: Scalar>(
    probs: &[T],
    batch: usize,
    classes: usize,
    labels: &[usize],
    upstream: T,
) -> Vec<T> {
    let scale = upstream / T::from_f64(batch as f64);
    let mut d = probs.to_vec();
    for (n, row) in d.chunks_mut(classes).enumerate() {
        row[labels[n]] = row[labels[n]] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    d
}
