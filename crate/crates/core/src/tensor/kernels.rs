//! Raw numeric kernels behind the graph operations. Forward kernels for
//! matmul and convolution may parallelize over output elements; every output
//! element is accumulated in a fixed order, so results are identical with
//! and without threading.

use rayon::prelude::*;

use super::Scalar;
use crate::runtime;

/// `[m,k] x [k,n] -> [m,n]`
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, orow: &mut [T]| {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            orow[j] = acc;
        }
    };
    match runtime::pool() {
        Some(pool) if m > 1 => pool.install(|| {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
        }),
        _ => out.chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow)),
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[p * m + i] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Cross-correlation of `x: [c,h,w]` with `w: [o,c,kh,kw]`, zero padding.
pub fn conv2d<T: Scalar>(
    x: &[T],
    xs: [usize; 3],
    w: &[T],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 3]) {
    let [c, h, wid] = xs;
    let [o, _, kh, kw] = ws;
    let h2 = conv2d_out_extent(h, kh, stride, pad);
    let w2 = conv2d_out_extent(wid, kw, stride, pad);
    let mut out = vec![T::zero(); o * h2 * w2];
    let channel = |oc: usize, plane: &mut [T]| {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut acc = T::zero();
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix >= wid {
                                continue;
                            }
                            acc += x[(ic * h + iy) * wid + ix]
                                * w[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                plane[oy * w2 + ox] = acc;
            }
        }
    };
    match runtime::pool() {
        Some(pool) if o > 1 => pool.install(|| {
            out.par_chunks_mut(h2 * w2)
                .enumerate()
                .for_each(|(oc, plane)| channel(oc, plane));
        }),
        _ => out
            .chunks_mut(h2 * w2)
            .enumerate()
            .for_each(|(oc, plane)| channel(oc, plane)),
    }
    (out, [o, h2, w2])
}

/// Gradients of [`conv2d`] w.r.t. input and weights.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: [usize; 3],
    w: &[T],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    g: &[T],
    os: [usize; 3],
) -> (Vec<T>, Vec<T>) {
    let [c, h, wid] = xs;
    let [o, _, kh, kw] = ws;
    let [_, h2, w2] = os;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for oc in 0..o {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let go = g[(oc * h2 + oy) * w2 + ox];
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx).wrapping_sub(pad);
                            if ix >= wid {
                                continue;
                            }
                            let xi = (ic * h + iy) * wid + ix;
                            let wi = ((oc * c + ic) * kh + ky) * kw + kx;
                            dx[xi] += go * w[wi];
                            dw[wi] += go * x[xi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Cross-correlation of `x: [c,d,h,w]` with `w: [o,c,kd,kh,kw]`, zero padding.
pub fn conv3d<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 5],
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 4]) {
    let [c, d, h, wid] = xs;
    let [o, _, kd, kh, kw] = ws;
    let d2 = conv2d_out_extent(d, kd, stride, pad);
    let h2 = conv2d_out_extent(h, kh, stride, pad);
    let w2 = conv2d_out_extent(wid, kw, stride, pad);
    let mut out = vec![T::zero(); o * d2 * h2 * w2];
    let channel = |oc: usize, vol: &mut [T]| {
        for oz in 0..d2 {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for kz in 0..kd {
                            let iz = (oz * stride + kz).wrapping_sub(pad);
                            if iz >= d {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky).wrapping_sub(pad);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx).wrapping_sub(pad);
                                    if ix >= wid {
                                        continue;
                                    }
                                    acc += x[((ic * d + iz) * h + iy) * wid + ix]
                                        * w[(((oc * c + ic) * kd + kz) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    vol[(oz * h2 + oy) * w2 + ox] = acc;
                }
            }
        }
    };
    match runtime::pool() {
        Some(pool) if o > 1 => pool.install(|| {
            out.par_chunks_mut(d2 * h2 * w2)
                .enumerate()
                .for_each(|(oc, vol)| channel(oc, vol));
        }),
        _ => out
            .chunks_mut(d2 * h2 * w2)
            .enumerate()
            .for_each(|(oc, vol)| channel(oc, vol)),
    }
    (out, [o, d2, h2, w2])
}

/// Gradients of [`conv3d`] w.r.t. input and weights.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 5],
    stride: usize,
    pad: usize,
    g: &[T],
    os: [usize; 4],
) -> (Vec<T>, Vec<T>) {
    let [c, d, h, wid] = xs;
    let [o, _, kd, kh, kw] = ws;
    let [_, d2, h2, w2] = os;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for oc in 0..o {
        for oz in 0..d2 {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let go = g[((oc * d2 + oz) * h2 + oy) * w2 + ox];
                    for ic in 0..c {
                        for kz in 0..kd {
                            let iz = (oz * stride + kz).wrapping_sub(pad);
                            if iz >= d {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky).wrapping_sub(pad);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx).wrapping_sub(pad);
                                    if ix >= wid {
                                        continue;
                                    }
                                    let xi = ((ic * d + iz) * h + iy) * wid + ix;
                                    let wi =
                                        (((oc * c + ic) * kd + kz) * kh + ky) * kw + kx;
                                    dx[xi] += go * w[wi];
                                    dw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling over `x: [c,h,w]`; returns values, output shape, and the flat
/// input index of each selected maximum (first maximum wins ties).
pub fn max_pool2d<T: Scalar>(
    x: &[T],
    xs: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 3], Vec<usize>) {
    let [c, h, w] = xs;
    let h2 = conv2d_out_extent(h, k, stride, pad);
    let w2 = conv2d_out_extent(w, k, stride, pad);
    let mut out = vec![T::zero(); c * h2 * w2];
    let mut arg = vec![0usize; c * h2 * w2];
    for ic in 0..c {
        for oy in 0..h2 {
            for ox in 0..w2 {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky).wrapping_sub(pad);
                    if iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx).wrapping_sub(pad);
                        if ix >= w {
                            continue;
                        }
                        let xi = (ic * h + iy) * w + ix;
                        if x[xi] > best || best_i == usize::MAX {
                            best = x[xi];
                            best_i = xi;
                        }
                    }
                }
                let oi = (ic * h2 + oy) * w2 + ox;
                out[oi] = best;
                arg[oi] = best_i;
            }
        }
    }
    (out, [c, h2, w2], arg)
}

/// Max pooling over `x: [c,d,h,w]` with cubic windows.
pub fn max_pool3d<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 4], Vec<usize>) {
    let [c, d, h, w] = xs;
    let d2 = conv2d_out_extent(d, k, stride, pad);
    let h2 = conv2d_out_extent(h, k, stride, pad);
    let w2 = conv2d_out_extent(w, k, stride, pad);
    let mut out = vec![T::zero(); c * d2 * h2 * w2];
    let mut arg = vec![0usize; c * d2 * h2 * w2];
    for ic in 0..c {
        for oz in 0..d2 {
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kz in 0..k {
                        let iz = (oz * stride + kz).wrapping_sub(pad);
                        if iz >= d {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky).wrapping_sub(pad);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                let xi = ((ic * d + iz) * h + iy) * w + ix;
                                if x[xi] > best || best_i == usize::MAX {
                                    best = x[xi];
                                    best_i = xi;
                                }
                            }
                        }
                    }
                    let oi = ((ic * d2 + oz) * h2 + oy) * w2 + ox;
                    out[oi] = best;
                    arg[oi] = best_i;
                }
            }
        }
    }
    (out, [c, d2, h2, w2], arg)
}

/// Maps each flat input index of `shape` to the flat output index obtained by
/// dropping `axes`. `axes` must be sorted and deduplicated.
pub struct ReduceMap {
    pub out_shape: Vec<usize>,
    pub group: usize,
    in_shape: Vec<usize>,
    kept: Vec<bool>,
    out_strides: Vec<usize>,
}

impl ReduceMap {
    pub fn new(shape: &[usize], axes: &[usize]) -> Self {
        let kept: Vec<bool> = (0..shape.len()).map(|a| !axes.contains(&a)).collect();
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&kept)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .collect();
        let group: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1usize;
        for a in (0..shape.len()).rev() {
            if kept[a] {
                out_strides[a] = stride;
                stride *= shape[a];
            }
        }
        ReduceMap {
            out_shape,
            group,
            in_shape: shape.to_vec(),
            kept,
            out_strides,
        }
    }

    pub fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0usize;
        for a in (0..self.in_shape.len()).rev() {
            let coord = flat % self.in_shape[a];
            flat /= self.in_shape[a];
            if self.kept[a] {
                out += coord * self.out_strides[a];
            }
        }
        out
    }
}

/// Per-channel normalization of `x: [c, spatial...]` to zero mean and unit
/// population variance, with `eps` inside the square root. Returns the
/// normalized values plus the per-channel mean and reciprocal standard
/// deviation needed by the backward pass.
pub fn instance_norm<T: Scalar>(x: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / channels;
    let nt = T::from_usize(n);
    let mut out = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); channels];
    let mut inv_stds = vec![T::zero(); channels];
    for c in 0..channels {
        let xc = &x[c * n..(c + 1) * n];
        let mut s = T::zero();
        let mut s2 = T::zero();
        for &v in xc {
            s += v;
            s2 += v * v;
        }
        let mean = s / nt;
        let var = s2 / nt - mean * mean;
        let inv_std = (var + eps).sqrt().recip();
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(xc) {
            *o = (v - mean) * inv_std;
        }
        means[c] = mean;
        inv_stds[c] = inv_std;
    }
    (out, means, inv_stds)
}

/// Gradient of [`instance_norm`] w.r.t. its input, given the normalized
/// output `y` and the saved per-channel reciprocal standard deviations.
pub fn instance_norm_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    channels: usize,
    inv_stds: &[T],
) -> Vec<T> {
    let n = y.len() / channels;
    let nt = T::from_usize(n);
    let mut dx = vec![T::zero(); y.len()];
    for c in 0..channels {
        let yc = &y[c * n..(c + 1) * n];
        let gc = &g[c * n..(c + 1) * n];
        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for (&gv, &yv) in gc.iter().zip(yc) {
            g_mean += gv;
            gy_mean += gv * yv;
        }
        g_mean /= nt;
        gy_mean /= nt;
        for ((d, &gv), &yv) in dx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(yc) {
            *d = inv_stds[c] * (gv - g_mean - yv * gy_mean);
        }
    }
    dx
}
