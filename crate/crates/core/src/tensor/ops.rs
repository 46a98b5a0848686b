//! Forward and backward kernels.
//!
//! Every kernel is a pure function of its arguments. The autograd tape in
//! [`crate::autograd`] records which kernel produced a node and calls the
//! matching backward kernel; the kernels are also public so that oracle
//! tests and custom graph nodes can reuse them.
//!
//! 5-rank tensors use the batch, channel, temporal, height, width layout.

use rayon::prelude::*;

use super::{strides_of, Precision, Tensor};
use crate::error::{Error, Result};

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::dim(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, what: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim(format!("{what}: stride must be positive")));
    }
    if kernel == 0 || kernel > input + 2 * pad {
        return Err(Error::dim(format!(
            "{what}: kernel extent {kernel} does not fit input extent {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose source `o*stride + k - pad` lies inside `[0, input)`.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, input: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        (input + pad - k).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    f: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl ConvGeom {
    fn new(input: &Tensor, weight: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        expect_rank(input, 5, "conv3d input")?;
        expect_rank(weight, 5, "conv3d weight")?;
        let s = input.shape();
        let k = weight.shape();
        if s[1] != k[1] {
            return Err(Error::dim(format!(
                "conv3d: input has {} channels but weight expects {}",
                s[1], k[1]
            )));
        }
        Ok(ConvGeom {
            c: s[1],
            t: s[2],
            h: s[3],
            w: s[4],
            f: k[0],
            kt: k[2],
            kh: k[3],
            kw: k[4],
            ot: out_extent(s[2], k[2], stride[0], pad[0], "conv3d temporal")?,
            oh: out_extent(s[3], k[3], stride[1], pad[1], "conv3d height")?,
            ow: out_extent(s[4], k[4], stride[2], pad[2], "conv3d width")?,
            stride,
            pad,
        })
    }

    fn in_size(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ot * self.oh * self.ow
    }

    /// Calls `visit(in_row, out_row, ow_lo, ow_hi)` for every output row touched by
    /// kernel tap `(a, b, d)` of input channel `c`; `[ow_lo, ow_hi)` are the valid columns.
    #[inline]
    fn for_each_row(&self, c: usize, a: usize, b: usize, d: usize, mut visit: impl FnMut(usize, usize, usize, usize)) {
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let (t_lo, t_hi) = valid_range(self.ot, st, a, pt, self.t);
        let (h_lo, h_hi) = valid_range(self.oh, sh, b, ph, self.h);
        let (w_lo, w_hi) = valid_range(self.ow, sw, d, pw, self.w);
        if w_lo >= w_hi {
            return;
        }
        for ot in t_lo..t_hi {
            let it = ot * st + a - pt;
            for oh in h_lo..h_hi {
                let ih = oh * sh + b - ph;
                let in_row = ((c * self.t + it) * self.h + ih) * self.w;
                let out_row = (ot * self.oh + oh) * self.ow;
                visit(in_row, out_row, w_lo, w_hi);
            }
        }
    }
}

impl ConvGeom {
    fn taps(&self) -> usize {
        self.kt * self.kh * self.kw
    }

    /// Rows of the patch matrix: one per (input channel, kernel tap).
    fn patch_rows(&self) -> usize {
        self.c * self.taps()
    }

    /// Unfolds one batch item into a `[C * taps, OT * OH * OW]` patch matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let plane = self.out_plane();
        let [_, _, sw] = self.stride;
        let pw = self.pad[2];
        for c in 0..self.c {
            for a in 0..self.kt {
                for b in 0..self.kh {
                    for d in 0..self.kw {
                        let row = ((c * self.kt + a) * self.kh + b) * self.kw + d;
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        self.for_each_row(c, a, b, d, |in_row, out_row, lo, hi| {
                            for (k, v) in dst[out_row + lo..out_row + hi].iter_mut().enumerate() {
                                *v = x[in_row + (lo + k) * sw + d - pw];
                            }
                        });
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters patch-matrix entries back onto the input.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let plane = self.out_plane();
        let [_, _, sw] = self.stride;
        let pw = self.pad[2];
        for c in 0..self.c {
            for a in 0..self.kt {
                for b in 0..self.kh {
                    for d in 0..self.kw {
                        let row = ((c * self.kt + a) * self.kh + b) * self.kw + d;
                        let src = &col[row * plane..(row + 1) * plane];
                        self.for_each_row(c, a, b, d, |in_row, out_row, lo, hi| {
                            for (k, v) in src[out_row + lo..out_row + hi].iter().enumerate() {
                                x[in_row + (lo + k) * sw + d - pw] += v;
                            }
                        });
                    }
                }
            }
        }
    }
}

/// `c = a · b (+ c when accumulate)` for row-major operands given by (rows, cols) and strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64], accumulate: bool) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices covering every element addressed by the
    // given extents and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3D cross-correlation with zero padding.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if bias.len() != g.f {
        return Err(Error::dim(format!(
            "conv3d: bias has {} entries for {} filters",
            bias.len(),
            g.f
        )));
    }
    let batch = input.shape()[0];
    let precision = input.precision().join(weight.precision()).join(bias.precision());
    let plane = g.out_plane();
    let rows = g.patch_rows();
    let mut out = vec![0.0; batch * g.f * plane];
    let (x, w, bvec) = (input.data(), weight.data(), bias.data());
    out.par_chunks_mut(g.f * plane).enumerate().for_each(|(bi, o)| {
        let mut col = vec![0.0; rows * plane];
        g.im2col(&x[bi * g.in_size()..(bi + 1) * g.in_size()], &mut col);
        for (f, of) in o.chunks_mut(plane).enumerate() {
            of.fill(bvec[f]);
        }
        gemm(g.f, rows, plane, w, (rows as isize, 1), &col, (plane as isize, 1), o, true);
    });
    Ok(Tensor::from_parts_rounded(
        vec![batch, g.f, g.ot, g.oh, g.ow],
        out,
        precision,
    ))
}

/// Gradients of [`conv3d`] with respect to input (when requested), weight and bias.
pub fn conv3d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let batch = input.shape()[0];
    let plane = g.out_plane();
    if grad_out.shape() != [batch, g.f, g.ot, g.oh, g.ow] {
        return Err(Error::dim("conv3d backward: gradient shape mismatch"));
    }
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let rows = g.patch_rows();
    let in_size = g.in_size();

    // Per batch item: weight gradient and (optionally) input gradient. The
    // weight gradients are summed afterwards in batch order.
    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let gob = &go[bi * g.f * plane..(bi + 1) * g.f * plane];
            let mut col = vec![0.0; rows * plane];
            g.im2col(&x[bi * in_size..(bi + 1) * in_size], &mut col);
            let mut gw = vec![0.0; g.f * rows];
            gemm(g.f, plane, rows, gob, (plane as isize, 1), &col, (1, plane as isize), &mut gw, false);
            let mut gin = Vec::new();
            if need_input {
                gemm(rows, g.f, plane, w, (1, rows as isize), gob, (plane as isize, 1), &mut col, false);
                gin = vec![0.0; in_size];
                g.col2im(&col, &mut gin);
            }
            (gw, gin)
        })
        .collect();

    let mut gw = vec![0.0; g.f * rows];
    let mut gin = Vec::with_capacity(if need_input { batch * in_size } else { 0 });
    for (w_item, in_item) in per_item {
        for (acc, v) in gw.iter_mut().zip(w_item) {
            *acc += v;
        }
        gin.extend(in_item);
    }
    let mut gb = vec![0.0; g.f];
    for bi in 0..batch {
        for (f, gbf) in gb.iter_mut().enumerate() {
            *gbf += go[(bi * g.f + f) * plane..(bi * g.f + f + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    Ok((
        need_input.then(|| Tensor::from_parts(input.shape().to_vec(), gin, Precision::F64)),
        Tensor::from_parts(weight.shape().to_vec(), gw, Precision::F64),
        Tensor::from_parts(vec![g.f], gb, Precision::F64),
    ))
}

fn lift_2d(input: &Tensor, weight: &Tensor) -> Result<(Tensor, Tensor)> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(weight, 4, "conv2d weight")?;
    let s = input.shape();
    let k = weight.shape();
    Ok((
        input.reshape(&[s[0], s[1], 1, s[2], s[3]])?,
        weight.reshape(&[k[0], k[1], 1, k[2], k[3]])?,
    ))
}

/// 2D cross-correlation with zero padding, evaluated as a depth-1 [`conv3d`].
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: [usize; 2], pad: [usize; 2]) -> Result<Tensor> {
    let (x, w) = lift_2d(input, weight)?;
    let out = conv3d(&x, &w, bias, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
    let s = out.shape();
    out.reshape(&[s[0], s[1], s[3], s[4]])
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: [usize; 2],
    pad: [usize; 2],
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (x, w) = lift_2d(input, weight)?;
    let s = grad_out.shape();
    if s.len() != 4 {
        return Err(Error::dim("conv2d backward: gradient must be rank 4"));
    }
    let go = grad_out.reshape(&[s[0], s[1], 1, s[2], s[3]])?;
    let (gi, gw, gb) = conv3d_backward(&x, &w, &go, [1, stride[0], stride[1]], [0, pad[0], pad[1]], need_input)?;
    Ok((
        gi.map(|t| t.reshape(input.shape())).transpose()?,
        gw.reshape(weight.shape())?,
        gb,
    ))
}

/// Max pooling over (T, H, W) windows; returns the pooled tensor and, per
/// output cell, the flat input index of the window maximum (first in
/// row-major scan order on ties).
pub fn maxpool3d(input: &Tensor, kernel: [usize; 3], stride: [usize; 3]) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 5, "maxpool3d input")?;
    let s = input.shape();
    let (b, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let ot = out_extent(t, kernel[0], stride[0], 0, "maxpool3d temporal")?;
    let oh = out_extent(h, kernel[1], stride[1], 0, "maxpool3d height")?;
    let ow = out_extent(w, kernel[2], stride[2], 0, "maxpool3d width")?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ot * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for bc in 0..b * c {
        let base = bc * t * h * w;
        for i in 0..ot {
            for j in 0..oh {
                for k in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for a in 0..kernel[0] {
                        for bb in 0..kernel[1] {
                            for d in 0..kernel[2] {
                                let idx = base
                                    + ((i * stride[0] + a) * h + j * stride[1] + bb) * w
                                    + k * stride[2]
                                    + d;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, c, ot, oh, ow], out, input.precision()),
        argmax,
    ))
}

pub fn maxpool3d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gin = vec![0.0; input_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gin[idx] += g;
    }
    Tensor::from_parts(input_shape.to_vec(), gin, Precision::F64)
}

/// Average pooling whose window covers the whole remaining (T, H, W) volume,
/// flattened to `[B, C]`.
pub fn global_avgpool3d(input: &Tensor, kernel: [usize; 3]) -> Result<Tensor> {
    expect_rank(input, 5, "global_avgpool3d input")?;
    let s = input.shape();
    if kernel != [s[2], s[3], s[4]] {
        return Err(Error::dim(format!(
            "global_avgpool3d: kernel {kernel:?} must equal the remaining extents {:?}",
            &s[2..]
        )));
    }
    let vol = s[2] * s[3] * s[4];
    let out = input
        .data()
        .chunks(vol)
        .map(|c| c.iter().sum::<f64>() / vol as f64)
        .collect();
    Ok(Tensor::from_parts_rounded(vec![s[0], s[1]], out, input.precision()))
}

pub fn global_avgpool3d_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let vol: usize = input_shape[2..].iter().product();
    let scale = 1.0 / vol as f64;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, vol))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data, Precision::F64)
}

/// Per-channel layout of a normalization input: `[outer, channels, inner]`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!(
            "batchnorm: input must have a batch and a channel axis, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Saved context of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNormContext {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalizes each channel with the batch mean and biased batch variance.
pub fn batchnorm_train(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, BatchNormContext)> {
    let (outer, ch, inner) = channel_layout(input.shape())?;
    if gamma.len() != ch || beta.len() != ch {
        return Err(Error::dim(format!(
            "batchnorm: {ch} channels but gamma/beta have {}/{} entries",
            gamma.len(),
            beta.len()
        )));
    }
    let x = input.data();
    let count = outer * inner;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for o in 0..outer {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += x[(o * ch + c) * inner..(o * ch + c + 1) * inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for o in 0..outer {
        for c in 0..ch {
            var[c] += x[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let (gm, bt) = (gamma.data(), beta.data());
    for o in 0..outer {
        for c in 0..ch {
            let range = (o * ch + c) * inner..(o * ch + c + 1) * inner;
            for i in range {
                let n = (x[i] - mean[c]) * inv_std[c];
                normalized[i] = n;
                out[i] = gm[c] * n + bt[c];
            }
        }
    }
    let precision = input.precision().join(gamma.precision());
    Ok((
        Tensor::from_parts_rounded(input.shape().to_vec(), out, precision),
        BatchNormContext {
            normalized: Tensor::from_parts(input.shape().to_vec(), normalized, Precision::F64),
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

/// Gradients of [`batchnorm_train`] with respect to input, gamma and beta.
pub fn batchnorm_train_backward(grad_out: &Tensor, gamma: &Tensor, ctx: &BatchNormContext) -> (Tensor, Tensor, Tensor) {
    let (outer, ch, inner) = channel_layout(grad_out.shape()).expect("validated in forward");
    let (go, xh) = (grad_out.data(), ctx.normalized.data());
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    for o in 0..outer {
        for c in 0..ch {
            for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                sum_g[c] += go[i];
                sum_gx[c] += go[i] * xh[i];
            }
        }
    }
    let n = ctx.count as f64;
    let gm = gamma.data();
    let mut gin = vec![0.0; go.len()];
    for o in 0..outer {
        for c in 0..ch {
            let k = gm[c] * ctx.inv_std[c] / n;
            for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                gin[i] = k * (n * go[i] - sum_g[c] - xh[i] * sum_gx[c]);
            }
        }
    }
    (
        Tensor::from_parts(grad_out.shape().to_vec(), gin, Precision::F64),
        Tensor::from_parts(vec![ch], sum_gx, Precision::F64),
        Tensor::from_parts(vec![ch], sum_g, Precision::F64),
    )
}

/// Normalizes with fixed statistics; returns output and per-channel `1/sqrt(var+eps)`.
pub fn batchnorm_eval(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (outer, ch, inner) = channel_layout(input.shape())?;
    if gamma.len() != ch || beta.len() != ch || running_mean.len() != ch || running_var.len() != ch {
        return Err(Error::dim(format!("batchnorm: parameter widths do not match {ch} channels")));
    }
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let x = input.data();
    let (gm, bt) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for c in 0..ch {
            for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                out[i] = gm[c] * (x[i] - running_mean[c]) * inv_std[c] + bt[c];
            }
        }
    }
    let precision = input.precision().join(gamma.precision());
    Ok((Tensor::from_parts_rounded(input.shape().to_vec(), out, precision), inv_std))
}

/// Channel sums of `grad_out * per_element` as a `[C]` tensor.
pub(crate) fn channel_sum(grad_out: &Tensor, weights: Option<&Tensor>) -> Tensor {
    let (outer, ch, inner) = channel_layout(grad_out.shape()).expect("rank >= 2");
    let go = grad_out.data();
    let mut s = vec![0.0; ch];
    for o in 0..outer {
        for (c, sc) in s.iter_mut().enumerate() {
            let range = (o * ch + c) * inner..(o * ch + c + 1) * inner;
            *sc += match weights {
                Some(w) => range.map(|i| go[i] * w.data()[i]).sum::<f64>(),
                None => go[range].iter().sum::<f64>(),
            };
        }
    }
    Tensor::from_parts(vec![ch], s, Precision::F64)
}

/// Scales channel `c` of `t` by `factors[c]`.
pub(crate) fn channel_scale(t: &Tensor, factors: &[f64]) -> Tensor {
    let (outer, ch, inner) = channel_layout(t.shape()).expect("rank >= 2");
    let mut data = t.data().to_vec();
    for o in 0..outer {
        for c in 0..ch {
            data[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                .iter_mut()
                .for_each(|v| *v *= factors[c]);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), data, Precision::F64)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient where the input is strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(input.shape().to_vec(), data, Precision::F64)
}

/// `input · weightᵀ + bias` for `input: [B, D_in]`, `weight: [D_out, D_in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank(input, 2, "linear input")?;
    expect_rank(weight, 2, "linear weight")?;
    let (b, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    if weight.shape()[1] != din || bias.len() != dout {
        return Err(Error::dim(format!(
            "linear: input width {din}, weight {:?}, bias {}",
            weight.shape(),
            bias.len()
        )));
    }
    let (x, w, bs) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; b * dout];
    for i in 0..b {
        let row = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            out[i * dout + o] = bs[o]
                + row
                    .iter()
                    .zip(&w[o * din..(o + 1) * din])
                    .map(|(p, q)| p * q)
                    .sum::<f64>();
        }
    }
    let precision = input.precision().join(weight.precision()).join(bias.precision());
    Ok(Tensor::from_parts_rounded(vec![b, dout], out, precision))
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, need_input: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (b, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let gin = need_input.then(|| {
        let mut gin = vec![0.0; b * din];
        for i in 0..b {
            let gi = &mut gin[i * din..(i + 1) * din];
            for o in 0..dout {
                let g = go[i * dout + o];
                for (v, wv) in gi.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                    *v += g * wv;
                }
            }
        }
        Tensor::from_parts(vec![b, din], gin, Precision::F64)
    });
    let mut gw = vec![0.0; dout * din];
    let mut gb = vec![0.0; dout];
    for i in 0..b {
        let row = &x[i * din..(i + 1) * din];
        for o in 0..dout {
            let g = go[i * dout + o];
            gb[o] += g;
            for (v, xv) in gw[o * din..(o + 1) * din].iter_mut().zip(row) {
                *v += g * xv;
            }
        }
    }
    (
        gin,
        Tensor::from_parts(vec![dout, din], gw, Precision::F64),
        Tensor::from_parts(vec![dout], gb, Precision::F64),
    )
}

/// Inverted-dropout multiplier mask: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: rand::Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat: no parts given"))?;
    if axis >= first.rank() {
        return Err(Error::dim(format!("concat: axis {axis} out of range for rank {}", first.rank())));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(format!(
                "concat: part shape {:?} disagrees with {:?} off axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
        total += p.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let precision = parts.iter().fold(Precision::F32, |acc, p| acc.join(p.precision()));
    Ok(Tensor::from_parts(shape, data, precision))
}

/// Splits `grad` back into pieces of the given extents along `axis`.
pub fn split(grad: &Tensor, axis: usize, extents: &[usize]) -> Vec<Tensor> {
    let outer: usize = grad.shape()[..axis].iter().product();
    let inner: usize = grad.shape()[axis + 1..].iter().product();
    let total = grad.shape()[axis];
    let mut offset = 0;
    extents
        .iter()
        .map(|&e| {
            let mut data = Vec::with_capacity(outer * e * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&grad.data()[start..start + e * inner]);
            }
            offset += e;
            let mut shape = grad.shape().to_vec();
            shape[axis] = e;
            Tensor::from_parts(shape, data, grad.precision())
        })
        .collect()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(a, b, what)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts_rounded(
        a.shape().to_vec(),
        data,
        a.precision().join(b.precision()),
    ))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "hadamard", |x, y| x * y)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "maximum", f64::max)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, plus the probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank(logits, 2, "softmax_cross_entropy logits")?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0; b * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp() / sum;
        }
        loss += log_z - row[label];
    }
    Ok((
        loss / b as f64,
        Tensor::from_parts(vec![b, k], probs, Precision::F64),
    ))
}

/// Row-wise softmax of `[B, K]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "softmax logits")?;
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        out.extend(row.iter().map(|v| (v - max).exp() / sum));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out, Precision::F64))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_loss: f64) -> Tensor {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let mut g = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        g[i * k + label] -= 1.0;
    }
    let scale = grad_loss / b as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Tensor::from_parts(vec![b, k], g, Precision::F64)
}

/// `out[i] = input[map[i]]`.
pub fn gather(input: &Tensor, map: &[usize], shape: &[usize]) -> Tensor {
    debug_assert_eq!(map.len(), shape.iter().product::<usize>());
    let x = input.data();
    Tensor::from_parts(shape.to_vec(), map.iter().map(|&i| x[i]).collect(), input.precision())
}

pub fn gather_backward(input_shape: &[usize], map: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = vec![0.0; input_shape.iter().product()];
    for (&i, &v) in map.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Tensor::from_parts(input_shape.to_vec(), g, Precision::F64)
}

/// Gather map and output shape of an axis permutation.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!("invalid permutation {perm:?} for rank {}", shape.len())));
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((map, out_shape))
}

/// Gather map and output shape selecting `indices` along `axis`.
pub fn select_map(shape: &[usize], axis: usize, indices: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("select: axis {axis} out of range for {shape:?}")));
    }
    if indices.is_empty() {
        return Err(Error::input("select: no indices"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
        return Err(Error::input(format!("select: index {bad} out of range for extent {}", shape[axis])));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut map = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * shape[axis] + i) * inner;
            map.extend(start..start + inner);
        }
    }
    let mut out = shape.to_vec();
    out[axis] = indices.len();
    Ok((map, out))
}

/// Gather map resizing the trailing three axes of a 5-rank tensor by nearest neighbour.
pub fn resize_nearest_map(shape: &[usize], target: [usize; 3]) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 5 || target.contains(&0) {
        return Err(Error::dim(format!("resize: need a rank-5 input and positive target, got {shape:?} -> {target:?}")));
    }
    let src = [shape[2], shape[3], shape[4]];
    let pick = |o: usize, axis: usize| (o * src[axis]) / target[axis];
    let mut map = Vec::with_capacity(shape[0] * shape[1] * target.iter().product::<usize>());
    for bc in 0..shape[0] * shape[1] {
        for t in 0..target[0] {
            for h in 0..target[1] {
                for w in 0..target[2] {
                    map.push(((bc * src[0] + pick(t, 0)) * src[1] + pick(h, 1)) * src[2] + pick(w, 2));
                }
            }
        }
    }
    Ok((map, vec![shape[0], shape[1], target[0], target[1], target[2]]))
}

/// Sums over the last axis.
pub fn sum_last_axis(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::dim("sum_last_axis: need rank >= 2"));
    }
    let last = *input.shape().last().expect("rank >= 2");
    let data = input.data().chunks(last).map(|c| c.iter().sum()).collect();
    Ok(Tensor::from_parts_rounded(
        input.shape()[..input.rank() - 1].to_vec(),
        data,
        input.precision(),
    ))
}

pub fn sum_last_axis_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let last = *input_shape.last().expect("rank >= 2");
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g, last))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data, Precision::F64)
}
