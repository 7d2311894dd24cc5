//! Forward and backward numeric kernels on NCHW tensors.
//!
//! Convolutions lower to `im2col` + GEMM. The column buffer is built a band
//! of output rows at a time so that its size stays under [`MAX_COL_ELEMS`]
//! regardless of resolution. Work is split across images of a batch; weight
//! gradients are summed image by image in index order.

use crate::par;
use crate::tensor::{Shape, Tensor};

/// Upper bound on the number of `f64`s in one im2col band (32 MiB).
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn pointwise() -> Self {
        Self {
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    /// Square kernel with "same" padding for stride 1.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride: 1,
            pad: dilation * (k - 1) / 2,
            dilation,
        }
    }

    pub const fn new(k: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            pad,
            dilation,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        *self == Self::pointwise()
    }

    /// Output extent along one axis, `None` if the kernel does not fit.
    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_dim(h, self.kh)?, self.out_dim(w, self.kw)?))
    }
}

/// `c = a·b + beta·c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above (checked in debug builds, guaranteed by the
    // callers' shape arithmetic) keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct Im2Col<'a> {
    x: &'a [f64],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ow: usize,
}

impl Im2Col<'_> {
    fn rows(&self) -> usize {
        self.c * self.g.kh * self.g.kw
    }

    fn rows_per_band(&self) -> usize {
        (MAX_COL_ELEMS / (self.rows() * self.ow).max(1)).max(1)
    }

    fn input_index(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.g.stride + k * self.g.dilation) as isize - self.g.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Fills `col` (`rows() × (r1-r0)·ow`) for output rows `r0..r1`.
    fn fill(&self, r0: usize, r1: usize, col: &mut [f64]) {
        let l = (r1 - r0) * self.ow;
        let ConvGeom { kh, kw, .. } = self.g;
        for c in 0..self.c {
            let plane = &self.x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let seg = &mut dst[ri * self.ow..(ri + 1) * self.ow];
                        match self.input_index(oy, ky, self.h) {
                            None => seg.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = self.input_index(ox, kx, self.w).map_or(0.0, |ix| src[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters a column-gradient band back onto `dx`.
    fn scatter(&self, r0: usize, r1: usize, dcol: &[f64], dx: &mut [f64]) {
        let l = (r1 - r0) * self.ow;
        let ConvGeom { kh, kw, .. } = self.g;
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let src = &dcol[row * l..(row + 1) * l];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let Some(iy) = self.input_index(oy, ky, self.h) else {
                            continue;
                        };
                        let seg = &src[ri * self.ow..(ri + 1) * self.ow];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, v) in seg.iter().enumerate() {
                            if let Some(ix) = self.input_index(ox, kx, self.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output shape of a convolution, `None` if the kernel does not fit.
pub fn conv2d_shape(x: Shape, out_c: usize, g: &ConvGeom) -> Option<Shape> {
    let (oh, ow) = g.out_hw(x.h, x.w)?;
    Some(Shape::new(x.n, out_c, oh, ow))
}

/// 2-D cross-correlation. `w` is `[out_c, in_c, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, g: &ConvGeom) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let out = conv2d_shape(xs, ws.n, g).expect("conv2d: kernel larger than padded input");
    let (co, k) = (ws.n, ws.c * ws.h * ws.w);
    let ohw = out.hw();
    let mut y = Tensor::zeros(out);
    par::for_each_chunk(y.data_mut(), co * ohw, |n, yi| {
        let xi = x.sample(n);
        if g.is_pointwise() {
            gemm(co, k, ohw, w.data(), k, 1, xi, ohw, 1, 0.0, yi, ohw, 1);
        } else {
            let ic = Im2Col {
                x: xi,
                c: xs.c,
                h: xs.h,
                w: xs.w,
                g: *g,
                ow: out.w,
            };
            let band = ic.rows_per_band().min(out.h);
            let mut col = vec![0.0; k * band * out.w];
            let mut r0 = 0;
            while r0 < out.h {
                let r1 = (r0 + band).min(out.h);
                let l = (r1 - r0) * out.w;
                ic.fill(r0, r1, &mut col[..k * l]);
                gemm(co, k, l, w.data(), k, 1, &col, l, 1, 0.0, &mut yi[r0 * out.w..], ohw, 1);
                r0 = r1;
            }
        }
        if let Some(b) = bias {
            for (o, plane) in yi.chunks_mut(ohw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Vec<f64>,
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: &ConvGeom, need_dx: bool) -> ConvGrads {
    let xs = x.shape();
    let ws = w.shape();
    let ys = dy.shape();
    let (co, k) = (ws.n, ws.c * ws.h * ws.w);
    let ohw = ys.hw();

    let per_image = |n: usize| -> (Vec<f64>, Option<Vec<f64>>) {
        let xi = x.sample(n);
        let dyi = dy.sample(n);
        let mut dw = vec![0.0; co * k];
        let mut dx = need_dx.then(|| vec![0.0; xs.chw()]);
        if g.is_pointwise() {
            gemm(co, ohw, k, dyi, ohw, 1, xi, 1, ohw, 0.0, &mut dw, k, 1);
            if let Some(dx) = dx.as_mut() {
                gemm(k, co, ohw, w.data(), 1, k, dyi, ohw, 1, 0.0, dx, ohw, 1);
            }
        } else {
            let ic = Im2Col {
                x: xi,
                c: xs.c,
                h: xs.h,
                w: xs.w,
                g: *g,
                ow: ys.w,
            };
            let band = ic.rows_per_band().min(ys.h);
            let mut col = vec![0.0; k * band * ys.w];
            let mut dcol = if need_dx { vec![0.0; k * band * ys.w] } else { Vec::new() };
            let mut r0 = 0;
            while r0 < ys.h {
                let r1 = (r0 + band).min(ys.h);
                let l = (r1 - r0) * ys.w;
                let dy_band = &dyi[r0 * ys.w..];
                ic.fill(r0, r1, &mut col[..k * l]);
                gemm(co, l, k, dy_band, ohw, 1, &col, 1, l, 1.0, &mut dw, k, 1);
                if let Some(dx) = dx.as_mut() {
                    gemm(k, co, l, w.data(), 1, k, dy_band, ohw, 1, 0.0, &mut dcol[..k * l], l, 1);
                    ic.scatter(r0, r1, &dcol[..k * l], dx);
                }
                r0 = r1;
            }
        }
        (dw, dx)
    };

    let mut dw = vec![0.0; co * k];
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    let wave = par::num_threads().max(1);
    let mut start = 0;
    while start < xs.n {
        let end = (start + wave).min(xs.n);
        let parts = par::map(end - start, |i| per_image(start + i));
        for (i, (dwi, dxi)) in parts.into_iter().enumerate() {
            dw.iter_mut().zip(&dwi).for_each(|(a, b)| *a += b);
            if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                let chw = xs.chw();
                let n = start + i;
                dx.data_mut()[n * chw..(n + 1) * chw].copy_from_slice(&dxi);
            }
        }
        start = end;
    }

    let mut db = vec![0.0; co];
    for n in 0..ys.n {
        for (o, plane) in dy.sample(n).chunks(ohw).enumerate() {
            db[o] += plane.iter().sum::<f64>();
        }
    }
    ConvGrads {
        dx,
        dw: Tensor::from_parts(ws, dw),
        db,
    }
}

/// Per-channel `x·w[c] + b[c]` (depthwise 1×1 convolution).
pub fn channel_affine(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let s = x.shape();
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s.hw()).enumerate() {
        let c = i % s.c;
        plane.iter_mut().for_each(|v| *v = *v * w[c] + b[c]);
    }
    y
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h / k, s.w / k);
    let mut y = Tensor::zeros(s.with_hw(oh, ow));
    let inv = 1.0 / (k * k) as f64;
    for (plane, out) in x.data().chunks(s.hw()).zip(y.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &plane[(oy * k + dy) * s.w + ox * k..];
                    acc += row[..k].iter().sum::<f64>();
                }
                out[oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor, k: usize, input: Shape) -> Tensor {
    let ds = dy.shape();
    let mut dx = Tensor::zeros(input);
    let inv = 1.0 / (k * k) as f64;
    for (gplane, dplane) in dy.data().chunks(ds.hw()).zip(dx.data_mut().chunks_mut(input.hw())) {
        for oy in 0..ds.h {
            for ox in 0..ds.w {
                let g = gplane[oy * ds.w + ox] * inv;
                for ky in 0..k {
                    let row = &mut dplane[(oy * k + ky) * input.w + ox * k..];
                    row[..k].iter_mut().for_each(|v| *v += g);
                }
            }
        }
    }
    dx
}

/// Max pooling with implicit `-inf` padding. Returns the pooled tensor and
/// the flat in-plane index of every maximum.
pub fn max_pool(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let g = ConvGeom::new(k, stride, pad, 1);
    let (oh, ow) = g.out_hw(s.h, s.w).expect("max_pool: window larger than input");
    let mut y = Tensor::zeros(s.with_hw(oh, ow));
    let mut arg = vec![0u32; y.len()];
    for (p, plane) in x.data().chunks(s.hw()).enumerate() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= s.h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= s.w {
                            continue;
                        }
                        let i = iy as usize * s.w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y.data_mut()[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(dy: &Tensor, arg: &[u32], input: Shape) -> Tensor {
    let ds = dy.shape();
    let mut dx = Tensor::zeros(input);
    for (p, (gplane, aplane)) in dy.data().chunks(ds.hw()).zip(arg.chunks(ds.hw())).enumerate() {
        let dplane = &mut dx.data_mut()[p * input.hw()..(p + 1) * input.hw()];
        for (g, &a) in gplane.iter().zip(aplane) {
            dplane[a as usize] += g;
        }
    }
    dx
}

/// Spatial mean per channel, `[n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let inv = 1.0 / s.hw() as f64;
    let data = x.data().chunks(s.hw()).map(|p| p.iter().sum::<f64>() * inv).collect();
    Tensor::from_parts(s.with_hw(1, 1), data)
}

/// Per-pixel mean over channels, `[n, 1, h, w]`.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut y = Tensor::zeros(s.with_c(1));
    let inv = 1.0 / s.c as f64;
    for n in 0..s.n {
        let xi = x.sample(n);
        let out = &mut y.data_mut()[n * s.hw()..(n + 1) * s.hw()];
        for plane in xi.chunks(s.hw()) {
            out.iter_mut().zip(plane).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
    }
    y
}

/// Per-pixel maximum over channels and the winning channel index.
pub fn channel_max(x: &Tensor) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let mut y = Tensor::full(s.with_c(1), f64::NEG_INFINITY);
    let mut arg = vec![0u32; s.n * s.hw()];
    for n in 0..s.n {
        let xi = x.sample(n);
        let out = &mut y.data_mut()[n * s.hw()..(n + 1) * s.hw()];
        let am = &mut arg[n * s.hw()..(n + 1) * s.hw()];
        for (c, plane) in xi.chunks(s.hw()).enumerate() {
            for ((o, a), &v) in out.iter_mut().zip(am.iter_mut()).zip(plane) {
                if v > *o {
                    *o = v;
                    *a = c as u32;
                }
            }
        }
    }
    (y, arg)
}

/// Source index pair and interpolation weight for one output coordinate,
/// following the half-pixel (`align_corners = false`) convention.
fn bilinear_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    if (s.h, s.w) == (oh, ow) {
        return x.clone();
    }
    let ty = bilinear_taps(oh, s.h);
    let tx = bilinear_taps(ow, s.w);
    let mut y = Tensor::zeros(s.with_hw(oh, ow));
    for (plane, out) in x.data().chunks(s.hw()).zip(y.data_mut().chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = plane[y0 * s.w + x0] * (1.0 - lx) + plane[y0 * s.w + x1] * lx;
                let bot = plane[y1 * s.w + x0] * (1.0 - lx) + plane[y1 * s.w + x1] * lx;
                out[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    y
}

pub fn bilinear_backward(dy: &Tensor, input: Shape) -> Tensor {
    let ds = dy.shape();
    if (ds.h, ds.w) == (input.h, input.w) {
        return dy.clone();
    }
    let ty = bilinear_taps(ds.h, input.h);
    let tx = bilinear_taps(ds.w, input.w);
    let mut dx = Tensor::zeros(input);
    for (gplane, dplane) in dy.data().chunks(ds.hw()).zip(dx.data_mut().chunks_mut(input.hw())) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = gplane[oy * ds.w + ox];
                dplane[y0 * input.w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dplane[y0 * input.w + x1] += g * (1.0 - ly) * lx;
                dplane[y1 * input.w + x0] += g * ly * (1.0 - lx);
                dplane[y1 * input.w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (`floor(o·in/out)` source index). Not
/// differentiable; used for masks.
pub fn nearest(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = x.shape();
    let mut y = Tensor::zeros(s.with_hw(oh, ow));
    for (plane, out) in x.data().chunks(s.hw()).zip(y.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let iy = oy * s.h / oh;
            for ox in 0..ow {
                out[oy * ow + ox] = plane[iy * s.w + ox * s.w / ow];
            }
        }
    }
    y
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut y = x.clone();
    let hw = s.hw();
    for n in 0..s.n {
        let yi = &mut y.data_mut()[n * s.chw()..(n + 1) * s.chw()];
        for p in 0..hw {
            let m = (0..s.c).map(|c| yi[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (yi[c * hw + p] - m).exp();
                yi[c * hw + p] = e;
                z += e;
            }
            for c in 0..s.c {
                yi[c * hw + p] /= z;
            }
        }
    }
    y
}

pub fn softmax_channels_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let s = y.shape();
    let hw = s.hw();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let yi = y.sample(n);
        let gi = dy.sample(n);
        let di = &mut dx.data_mut()[n * s.chw()..(n + 1) * s.chw()];
        for p in 0..hw {
            let dot: f64 = (0..s.c).map(|c| yi[c * hw + p] * gi[c * hw + p]).sum();
            for c in 0..s.c {
                di[c * hw + p] = yi[c * hw + p] * (gi[c * hw + p] - dot);
            }
        }
    }
    dx
}

/// Per-channel statistics used to normalise a batch.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Unbiased variance, for running-average updates.
    pub var_unbiased: Vec<f64>,
}

pub fn batch_stats(x: &Tensor, eps: f64) -> NormStats {
    let s = x.shape();
    let m = (s.n * s.hw()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, plane) in x.sample(n).chunks(s.hw()).enumerate() {
            mean[c] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for n in 0..s.n {
        for (c, plane) in x.sample(n).chunks(s.hw()).enumerate() {
            var[c] += plane.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let inv_std = var.iter().map(|v| 1.0 / (v / m + eps).sqrt()).collect();
    let var_unbiased = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
    NormStats {
        mean,
        inv_std,
        var_unbiased,
    }
}

/// `gamma·(x - mean)·inv_std + beta` per channel.
pub fn normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = x.shape();
    let mut y = x.clone();
    for (i, plane) in y.data_mut().chunks_mut(s.hw()).enumerate() {
        let c = i % s.c;
        let (a, b) = (gamma[c] * inv_std[c], beta[c] - gamma[c] * inv_std[c] * mean[c]);
        plane.iter_mut().for_each(|v| *v = *v * a + b);
    }
    y
}

pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

/// Backward of [`normalize`]. With `batch_stats` the mean and variance are
/// treated as functions of `x`; otherwise they are constants.
pub fn normalize_backward(
    x: &Tensor,
    dy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> NormGrads {
    let s = x.shape();
    let hw = s.hw();
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * hw;
            for p in 0..hw {
                let xhat = (x.data()[o + p] - mean[c]) * inv_std[c];
                dgamma[c] += dy.data()[o + p] * xhat;
                dbeta[c] += dy.data()[o + p];
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let m = (s.n * hw) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * hw;
            for p in 0..hw {
                let g = dy.data()[o + p];
                dx.data_mut()[o + p] = if batch_stats {
                    let xhat = (x.data()[o + p] - mean[c]) * inv_std[c];
                    gamma[c] * inv_std[c] / m * (m * g - dbeta[c] - xhat * dgamma[c])
                } else {
                    g * gamma[c] * inv_std[c]
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
