//! Plain-loop kernels. Every reduction runs in a fixed sequential order so
//! results are bit-reproducible; parallel loops only ever write disjoint
//! per-sample outputs.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn gemm_at_b_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }
}

/// Lowers one HWC image to a `(ho·wo) × (kh·kw·cin)` patch matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || vec![T::zero(); g.positions() * g.patch()],
            |cols, (y, xs)| {
                im2col(g, xs, cols);
                if let Some(b) = bias {
                    for row in y.chunks_mut(g.cout) {
                        row.copy_from_slice(b);
                    }
                }
                gemm_acc(g.positions(), g.patch(), g.cout, cols, weight, y);
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_w, want_b) = want;
    let wt = transpose(g.patch(), g.cout, weight);
    let pw = g.patch() * g.cout;

    // Per-sample input gradients and weight-gradient partials; partials are
    // summed below in sample order.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = if want_x || want_w {
        (0..n)
            .into_par_iter()
            .map_init(
                || vec![T::zero(); g.positions() * g.patch()],
                |cols, s| {
                    let dys = &dy[s * g.out_len()..(s + 1) * g.out_len()];
                    let mut dxs = Vec::new();
                    let mut dws = Vec::new();
                    if want_x {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_acc(g.positions(), g.cout, g.patch(), dys, &wt, cols);
                        dxs = vec![T::zero(); g.in_len()];
                        col2im_acc(g, cols, &mut dxs);
                    }
                    if want_w {
                        im2col(g, &x[s * g.in_len()..(s + 1) * g.in_len()], cols);
                        dws = vec![T::zero(); pw];
                        gemm_at_b_acc(g.positions(), g.patch(), g.cout, cols, dys, &mut dws);
                    }
                    (dxs, dws)
                },
            )
            .collect()
    } else {
        Vec::new()
    };

    let dx = want_x.then(|| {
        let mut dx = Vec::with_capacity(n * g.in_len());
        for (dxs, _) in &per_sample {
            dx.extend_from_slice(dxs);
        }
        dx
    });
    let dw = want_w.then(|| {
        let mut acc = vec![T::zero(); pw];
        for (_, part) in &per_sample {
            for (a, &p) in acc.iter_mut().zip(part) {
                *a = *a + p;
            }
        }
        acc
    });
    let db = want_b.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for row in dy.chunks(g.cout) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        acc
    });
    ConvGrads { dx, dw, db }
}

/// Max pooling over NHWC. Returns outputs and, per output, the flat input
/// index of the winning element (first maximum on ties).
pub(crate) fn maxpool_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, [usize; 4]) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = ((s * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg, [n, ho, wo, c])
}

/// Per-channel mean and biased variance over every axis but the last.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let m = x.len() / c;
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let inv_m = T::one() / T::from_usize(m).expect("count");
    mean.iter_mut().for_each(|v| *v = *v * inv_m);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *a = *a + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv_m);
    (mean, var)
}

/// Row-wise numerically stable softmax of an `n × c` matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - max).exp();
            z = z + e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v = *v / z);
    }
    out
}
