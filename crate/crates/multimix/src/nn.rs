//! Low-level network ops: each forward comes with a hand-derived backward.
//!
//! All tensors are NCHW `Array4` in standard (row-major) layout; convolutions
//! are stride-1 with symmetric zero padding, lowered to matrix products via
//! im2col so the batched matmul does the heavy lifting.

use ndarray::{Array1, Array2, Array4};

use crate::scalar::Scalar;

fn slice<S: Scalar>(a: &Array4<S>) -> &[S] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<S: Scalar>(a: &mut Array4<S>) -> &mut [S] {
    a.as_slice_mut().expect("standard layout")
}

/// Lower (N,C,H,W) into (C*KH*KW, N*OH*OW) patch columns.
fn im2col<S: Scalar>(x: &Array4<S>, kh: usize, kw: usize, pad: usize) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let colw = n * oh * ow;
    let mut cols = Array2::<S>::zeros((c * kh * kw, colw));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * colw;
                // valid output columns for this kernel offset
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad).saturating_sub(kj).min(ow);
                if lo >= hi {
                    continue;
                }
                let iw0 = lo + kj - pad;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let ih = ohi as isize + ki as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst = row + (ni * oh + ohi) * ow;
                        let src = ((ni * c + ci) * h + ih as usize) * w + iw0;
                        cs[dst + lo..dst + hi].copy_from_slice(&xs[src..src + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch-column gradients back to (N,C,H,W).
fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> Array4<S> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let colw = n * oh * ow;
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * colw;
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad).saturating_sub(kj).min(ow);
                if lo >= hi {
                    continue;
                }
                let iw0 = lo + kj - pad;
                for ni in 0..n {
                    for ohi in 0..oh {
                        let ih = ohi as isize + ki as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src = row + (ni * oh + ohi) * ow;
                        let dst = ((ni * c + ci) * h + ih as usize) * w + iw0;
                        for k in 0..(hi - lo) {
                            xs[dst + k] += ds[src + lo + k];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// (O, N*OH*OW) matmul layout -> (N, O, OH, OW).
fn mat_to_nchw<S: Scalar>(m: &Array2<S>, n: usize, o: usize, oh: usize, ow: usize) -> Array4<S> {
    let mut y = Array4::<S>::zeros((n, o, oh, ow));
    let plane = oh * ow;
    let ms = m.as_slice().expect("standard layout");
    let ys = slice_mut(&mut y);
    for oi in 0..o {
        for ni in 0..n {
            let src = oi * n * plane + ni * plane;
            let dst = (ni * o + oi) * plane;
            ys[dst..dst + plane].copy_from_slice(&ms[src..src + plane]);
        }
    }
    y
}

/// Inverse of [`mat_to_nchw`].
fn nchw_to_mat<S: Scalar>(y: &Array4<S>) -> Array2<S> {
    let (n, o, oh, ow) = y.dim();
    let plane = oh * ow;
    let mut m = Array2::<S>::zeros((o, n * plane));
    let ys = slice(y);
    let ms = m.as_slice_mut().expect("standard layout");
    for oi in 0..o {
        for ni in 0..n {
            let dst = oi * n * plane + ni * plane;
            let src = (ni * o + oi) * plane;
            ms[dst..dst + plane].copy_from_slice(&ys[src..src + plane]);
        }
    }
    m
}

/// Stride-1 zero-padded convolution.
pub fn conv2d<S: Scalar>(x: &Array4<S>, w: &Array4<S>, b: &Array1<S>, pad: usize) -> Array4<S> {
    let (n, _, h, wd) = x.dim();
    let (o, c, kh, kw) = w.dim();
    debug_assert_eq!(x.dim().1, c);
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let cols = im2col(x, kh, kw, pad);
    let wmat = w.to_shape((o, c * kh * kw)).expect("contiguous weight");
    let mut ymat = wmat.dot(&cols);
    for (mut row, &bo) in ymat.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bo);
    }
    mat_to_nchw(&ymat, n, o, oh, ow)
}

pub struct ConvGrads<S: Scalar> {
    pub weight: Array4<S>,
    pub bias: Array1<S>,
}

/// Backward of [`conv2d`]. `x` is the forward input.
pub fn conv2d_backward<S: Scalar>(
    x: &Array4<S>,
    w: &Array4<S>,
    dy: &Array4<S>,
    pad: usize,
    need_param_grads: bool,
    need_input_grad: bool,
) -> (Option<ConvGrads<S>>, Option<Array4<S>>) {
    let (n, c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let dymat = nchw_to_mat(dy);
    let wmat = w.to_shape((o, c * kh * kw)).expect("contiguous weight");
    let param = if need_param_grads {
        let cols = im2col(x, kh, kw, pad);
        let dwmat = dymat.dot(&cols.t());
        let dw = dwmat
            .into_shape_with_order((o, c, kh, kw))
            .expect("weight shape");
        let db = dymat.sum_axis(ndarray::Axis(1));
        Some(ConvGrads {
            weight: dw,
            bias: db,
        })
    } else {
        None
    };
    let dx = if need_input_grad {
        let dcols = wmat.t().dot(&dymat);
        Some(col2im(&dcols, n, c, h, wd, kh, kw, pad))
    } else {
        None
    };
    (param, dx)
}

pub struct NormCache<S: Scalar> {
    pub xhat: Array4<S>,
    pub inv_std: Array2<S>,
}

/// Instance normalization with per-channel affine: y = gamma * xhat + beta,
/// xhat = (x - mean_nc) / sqrt(var_nc + eps), statistics over the spatial dims
/// of each (sample, channel) plane.
pub fn instance_norm<S: Scalar>(
    x: &Array4<S>,
    gamma: &Array1<S>,
    beta: &Array1<S>,
    eps: S,
) -> (Array4<S>, NormCache<S>) {
    let (n, c, h, w) = x.dim();
    let m = h * w;
    let minv = S::of_f64(1.0 / m as f64);
    let mut xhat = Array4::<S>::zeros((n, c, h, w));
    let mut inv_std = Array2::<S>::zeros((n, c));
    let mut y = Array4::<S>::zeros((n, c, h, w));
    let xs = slice(x);
    {
        let hs = slice_mut(&mut xhat);
        let ys = slice_mut(&mut y);
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * m;
                let plane = &xs[off..off + m];
                let mut mean = S::zero();
                for &v in plane {
                    mean += v;
                }
                mean *= minv;
                let mut var = S::zero();
                for &v in plane {
                    let d = v - mean;
                    var += d * d;
                }
                var *= minv;
                let istd = S::one() / (var + eps).sqrt();
                inv_std[(ni, ci)] = istd;
                let (g, bt) = (gamma[ci], beta[ci]);
                for k in 0..m {
                    let xh = (plane[k] - mean) * istd;
                    hs[off + k] = xh;
                    ys[off + k] = g * xh + bt;
                }
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub struct NormGrads<S: Scalar> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
}

pub fn instance_norm_backward<S: Scalar>(
    dy: &Array4<S>,
    gamma: &Array1<S>,
    cache: &NormCache<S>,
) -> (Array4<S>, NormGrads<S>) {
    let (n, c, h, w) = dy.dim();
    let m = h * w;
    let minv = S::of_f64(1.0 / m as f64);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    let mut dgamma = Array1::<S>::zeros(c);
    let mut dbeta = Array1::<S>::zeros(c);
    let dys = slice(dy);
    let hs = slice(&cache.xhat);
    let dxs = slice_mut(&mut dx);
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * m;
            let g = gamma[ci];
            let istd = cache.inv_std[(ni, ci)];
            let mut s1 = S::zero(); // sum of dxhat
            let mut s2 = S::zero(); // sum of dxhat * xhat
            let mut dg = S::zero();
            let mut db = S::zero();
            for k in 0..m {
                let dyv = dys[off + k];
                let xh = hs[off + k];
                let dxh = dyv * g;
                s1 += dxh;
                s2 += dxh * xh;
                dg += dyv * xh;
                db += dyv;
            }
            dgamma[ci] += dg;
            dbeta[ci] += db;
            let s1m = s1 * minv;
            let s2m = s2 * minv;
            for k in 0..m {
                let dxh = dys[off + k] * g;
                dxs[off + k] = istd * (dxh - s1m - hs[off + k] * s2m);
            }
        }
    }
    (
        dx,
        NormGrads {
            gamma: dgamma,
            beta: dbeta,
        },
    )
}

/// 2x2 max pool, stride 2. Returns the winning corner (0..4) per output cell.
pub fn maxpool2<S: Scalar>(x: &Array4<S>) -> (Array4<S>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    let mut idx = Array4::<u8>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x[(ni, ci, 2 * i, 2 * j)];
                    let mut which = 0u8;
                    for (k, (di, dj)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[(ni, ci, 2 * i + di, 2 * j + dj)];
                        if v > best {
                            best = v;
                            which = k as u8 + 1;
                        }
                    }
                    y[(ni, ci, i, j)] = best;
                    idx[(ni, ci, i, j)] = which;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<S: Scalar>(dy: &Array4<S>, idx: &Array4<u8>) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::<S>::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let which = idx[(ni, ci, i, j)] as usize;
                    let (di, dj) = (which / 2, which % 2);
                    dx[(ni, ci, 2 * i + di, 2 * j + dj)] = dy[(ni, ci, i, j)];
                }
            }
        }
    }
    dx
}

/// f x f average pool, stride f. Spatial dims must be divisible by f.
pub fn avgpool<S: Scalar>(x: &Array4<S>, f: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / f, w / f);
    let inv = S::of_f64(1.0 / (f * f) as f64);
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = S::zero();
                    for di in 0..f {
                        for dj in 0..f {
                            acc += x[(ni, ci, f * i + di, f * j + dj)];
                        }
                    }
                    y[(ni, ci, i, j)] = acc * inv;
                }
            }
        }
    }
    y
}

pub fn avgpool_backward<S: Scalar>(dy: &Array4<S>, f: usize) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let inv = S::of_f64(1.0 / (f * f) as f64);
    let mut dx = Array4::<S>::zeros((n, c, oh * f, ow * f));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let g = dy[(ni, ci, i, j)] * inv;
                    for di in 0..f {
                        for dj in 0..f {
                            dx[(ni, ci, f * i + di, f * j + dj)] = g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Spatial mean per (sample, channel).
pub fn global_avgpool<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let inv = S::of_f64(1.0 / (h * w) as f64);
    let mut y = Array2::<S>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::zero();
            for i in 0..h {
                for j in 0..w {
                    acc += x[(ni, ci, i, j)];
                }
            }
            y[(ni, ci)] = acc * inv;
        }
    }
    y
}

pub fn global_avgpool_backward<S: Scalar>(dy: &Array2<S>, h: usize, w: usize) -> Array4<S> {
    let (n, c) = dy.dim();
    let inv = S::of_f64(1.0 / (h * w) as f64);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy[(ni, ci)] * inv;
            dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<S>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ni, ci, i, j)];
                    y[(ni, ci, 2 * i, 2 * j)] = v;
                    y[(ni, ci, 2 * i, 2 * j + 1)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j)] = v;
                    y[(ni, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<S: Scalar>(dy: &Array4<S>) -> Array4<S> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[(ni, ci, i, j)] = dy[(ni, ci, 2 * i, 2 * j)]
                        + dy[(ni, ci, 2 * i, 2 * j + 1)]
                        + dy[(ni, ci, 2 * i + 1, 2 * j)]
                        + dy[(ni, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    dx
}

/// Fully connected: y = x W^T + b with w of shape (out, in).
pub fn linear<S: Scalar>(x: &Array2<S>, w: &Array2<S>, b: &Array1<S>) -> Array2<S> {
    let mut y = x.dot(&w.t());
    for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
        row.zip_mut_with(b, |v, &bo| *v += bo);
    }
    y
}

pub struct LinearGrads<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Array2<S>,
    w: &Array2<S>,
    dy: &Array2<S>,
    need_param_grads: bool,
) -> (Array2<S>, Option<LinearGrads<S>>) {
    let dx = dy.dot(w);
    let grads = need_param_grads.then(|| LinearGrads {
        weight: dy.t().dot(x),
        bias: dy.sum_axis(ndarray::Axis(0)),
    });
    (dx, grads)
}

pub fn concat_channels<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    debug_assert_eq!((n, h, w), (b.dim().0, b.dim().2, b.dim().3));
    let mut y = Array4::<S>::zeros((n, ca + cb, h, w));
    y.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    y.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    y
}

pub fn split_channels<S: Scalar>(d: &Array4<S>, ca: usize) -> (Array4<S>, Array4<S>) {
    let da = d.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
    let db = d.slice(ndarray::s![.., ca.., .., ..]).to_owned();
    (da, db)
}

/// Row-wise stable softmax.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Numerically stable logistic squashing.
pub fn sigmoid_scalar<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
