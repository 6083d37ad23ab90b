//! Forward and backward kernels on plain tensors.
//!
//! Everything here is stateless; [`super::Tape`] strings the kernels together
//! and keeps what each backward pass needs.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// One output coordinate of a 1-D linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-centred bilinear taps for resizing `src` samples to `dst`.
pub fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w1 = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Nearest-neighbour source index for each of `dst` outputs.
pub fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

// ---------------------------------------------------------------------------
// convolution

fn conv_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<usize> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.height != ws.width || ws.height % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square and odd, got {}x{}", ws.height, ws.width),
        ));
    }
    if xs.channels != ws.channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels but the kernel expects {}",
                xs.channels, ws.channels
            ),
        ));
    }
    if b.len() != ws.batch {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {} filters", b.len(), ws.batch),
        ));
    }
    Ok(ws.height)
}

/// Unfolds one sample (`C x H x W`) into `(C*k*k) x (H*W)` columns, zero padded.
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + dy;
                    let dst = &mut out[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    let sx0 = (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&srow[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the sample, accumulating.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let sx0 = (x_lo as isize + dx) as usize;
                    let drow = &mut plane[iy as usize * w + sx0..iy as usize * w + sx0 + (x_hi - x_lo)];
                    for (d, &s) in drow.iter_mut().zip(&col[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `w` is `(out, in, k, k)`, `b` has `out` entries.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let k = conv_geometry(x, w, b)?;
    let xs = x.shape();
    let out_c = w.shape().batch;
    let hw = xs.plane();
    let ck = xs.channels * k * k;
    let mut out = Tensor::zeros(xs.with_channels(out_c));
    let bias = b.data();
    out.data_mut()
        .par_chunks_mut(out_c * hw)
        .enumerate()
        .for_each(|(n, dst)| {
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bias[o]);
            }
            let src = x.sample(n);
            if k == 1 {
                T::gemm(
                    out_c,
                    ck,
                    hw,
                    T::one(),
                    w.data(),
                    (ck as isize, 1),
                    src,
                    (hw as isize, 1),
                    T::one(),
                    dst,
                    (hw as isize, 1),
                );
            } else {
                let mut cols = vec![T::zero(); ck * hw];
                im2col(src, xs.channels, xs.height, xs.width, k, &mut cols);
                T::gemm(
                    out_c,
                    ck,
                    hw,
                    T::one(),
                    w.data(),
                    (ck as isize, 1),
                    &cols,
                    (hw as isize, 1),
                    T::one(),
                    dst,
                    (hw as isize, 1),
                );
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, gy: &Tensor<T>) -> Result<ConvGrads<T>> {
    let k = conv_geometry(x, w, b)?;
    let xs = x.shape();
    let out_c = w.shape().batch;
    let hw = xs.plane();
    let ck = xs.channels * k * k;
    let mut gx = Tensor::zeros(xs);

    // Per-sample weight/bias gradients, reduced afterwards in sample order so the
    // result does not depend on scheduling.
    let partials: Vec<(Vec<T>, Vec<T>)> = gx
        .data_mut()
        .par_chunks_mut(xs.sample_len())
        .enumerate()
        .map(|(n, gx_n)| {
            let g = gy.sample(n);
            let src = x.sample(n);
            let mut gw = vec![T::zero(); out_c * ck];
            let gb: Vec<T> = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
            if k == 1 {
                // gw = gy * x^T ; gx = w^T * gy
                T::gemm(
                    out_c,
                    hw,
                    ck,
                    T::one(),
                    g,
                    (hw as isize, 1),
                    src,
                    (1, hw as isize),
                    T::zero(),
                    &mut gw,
                    (ck as isize, 1),
                );
                T::gemm(
                    ck,
                    out_c,
                    hw,
                    T::one(),
                    w.data(),
                    (1, ck as isize),
                    g,
                    (hw as isize, 1),
                    T::zero(),
                    gx_n,
                    (hw as isize, 1),
                );
            } else {
                let mut cols = vec![T::zero(); ck * hw];
                im2col(src, xs.channels, xs.height, xs.width, k, &mut cols);
                T::gemm(
                    out_c,
                    hw,
                    ck,
                    T::one(),
                    g,
                    (hw as isize, 1),
                    &cols,
                    (1, hw as isize),
                    T::zero(),
                    &mut gw,
                    (ck as isize, 1),
                );
                T::gemm(
                    ck,
                    out_c,
                    hw,
                    T::one(),
                    w.data(),
                    (1, ck as isize),
                    g,
                    (hw as isize, 1),
                    T::zero(),
                    &mut cols,
                    (hw as isize, 1),
                );
                col2im(&cols, xs.channels, xs.height, xs.width, k, gx_n);
            }
            (gw, gb)
        })
        .collect();

    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(b.shape());
    for (pw, pb) in partials {
        for (a, v) in gw.data_mut().iter_mut().zip(pw) {
            *a = *a + v;
        }
        for (a, v) in gb.data_mut().iter_mut().zip(pb) {
            *a = *a + v;
        }
    }
    Ok(ConvGrads { x: gx, w: gw, b: gb })
}

// ---------------------------------------------------------------------------
// batch normalization

/// Statistics saved by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().channels;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "input has {c} channels, affine parameters have {}/{}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    Ok(())
}

/// Normalizes with the batch statistics over `(batch, height, width)`.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    check_bn(x, gamma, beta)?;
    let s = x.shape();
    let count = T::from_usize(s.batch * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.channels];
    let mut var = vec![T::zero(); s.channels];
    for c in 0..s.channels {
        let mut acc = T::zero();
        for n in 0..s.batch {
            acc = acc + x.channel_plane(n, c).iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.batch {
            for &v in x.channel_plane(n, c) {
                let d = v - m;
                sq = sq + d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    let hw = s.plane();
    for n in 0..s.batch {
        for c in 0..s.channels {
            let off = x.offset(n, c, 0, 0);
            let (g, bt) = (gamma.data()[c], beta.data()[c]);
            for i in off..off + hw {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + bt;
            }
        }
    }
    Ok((
        y,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = gy.shape();
    let hw = s.plane();
    let count = T::from_usize(s.batch * hw).unwrap();
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    let mut gx = Tensor::zeros(s);
    for c in 0..s.channels {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.batch {
            let off = gy.offset(n, c, 0, 0);
            for i in off..off + hw {
                sum_g = sum_g + gy.data()[i];
                sum_gx = sum_gx + gy.data()[i] * saved.xhat.data()[i];
            }
        }
        ggamma.data_mut()[c] = sum_gx;
        gbeta.data_mut()[c] = sum_g;
        let g = gamma.data()[c];
        let k = g * saved.inv_std[c] / count;
        for n in 0..s.batch {
            let off = gy.offset(n, c, 0, 0);
            for i in off..off + hw {
                let v = count * gy.data()[i] - sum_g - saved.xhat.data()[i] * sum_gx;
                gx.data_mut()[i] = k * v;
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Normalizes with fixed statistics (inference mode).
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    check_bn(x, gamma, beta)?;
    let s = x.shape();
    let hw = s.plane();
    let mut y = Tensor::zeros(s);
    for n in 0..s.batch {
        for c in 0..s.channels {
            let off = x.offset(n, c, 0, 0);
            let scale = gamma.data()[c] * inv_std[c];
            let shift = beta.data()[c] - mean[c] * scale;
            for i in off..off + hw {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(gx, ggamma, gbeta)` for the inference-mode affine map.
pub fn batch_norm_infer_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = gy.shape();
    let hw = s.plane();
    let mut gx = Tensor::zeros(s);
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    for n in 0..s.batch {
        for c in 0..s.channels {
            let off = gy.offset(n, c, 0, 0);
            let scale = gamma.data()[c] * inv_std[c];
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for i in off..off + hw {
                let g = gy.data()[i];
                gx.data_mut()[i] = g * scale;
                sg = sg + g;
                sgx = sgx + g * (x.data()[i] - mean[c]) * inv_std[c];
            }
            ggamma.data_mut()[c] = ggamma.data()[c] + sgx;
            gbeta.data_mut()[c] = gbeta.data()[c] + sg;
        }
    }
    (gx, ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// element-wise

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient flows only where the input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(gy, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Logistic function in the overflow-free two-branch form.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(gy, |s, g| g * s * (T::one() - s))
}

// ---------------------------------------------------------------------------
// resampling

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each output,
/// the flat input index that won (first in scan order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial size {}x{} is not even", s.height, s.width),
        ));
    }
    let os = s.with_spatial(s.height / 2, s.width / 2);
    let mut y = Tensor::zeros(os);
    let mut arg = vec![0u32; os.numel()];
    let mut o = 0;
    for n in 0..s.batch {
        for c in 0..s.channels {
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let mut best_i = x.offset(n, c, 2 * oy, 2 * ox);
                    let mut best = x.data()[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                    y.data_mut()[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward<T: Scalar>(input: Shape, argmax: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(gy.data()) {
        let d = &mut gx.data_mut()[i as usize];
        *d = *d + g;
    }
    gx
}

/// Separable bilinear resize of every plane to `out_h x out_w`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let ty = linear_taps(s.height, out_h);
    let tx = linear_taps(s.width, out_w);
    let os = s.with_spatial(out_h, out_w);
    let mut y = Tensor::zeros(os);
    let mut tmp = vec![T::zero(); s.height * out_w];
    for n in 0..s.batch {
        for c in 0..s.channels {
            let src = x.channel_plane(n, c);
            for r in 0..s.height {
                let row = &src[r * s.width..(r + 1) * s.width];
                for (o, t) in tx.iter().enumerate() {
                    tmp[r * out_w + o] = row[t.i0] * T::from_f64_lossy(t.w0) + row[t.i1] * T::from_f64_lossy(t.w1);
                }
            }
            let off = y.offset(n, c, 0, 0);
            let dst = &mut y.data_mut()[off..off + out_h * out_w];
            for (o, t) in ty.iter().enumerate() {
                let (w0, w1) = (T::from_f64_lossy(t.w0), T::from_f64_lossy(t.w1));
                for q in 0..out_w {
                    dst[o * out_w + q] = tmp[t.i0 * out_w + q] * w0 + tmp[t.i1 * out_w + q] * w1;
                }
            }
        }
    }
    y
}

/// Transpose of [`bilinear_resize`] from `gy`'s size back to `input`.
pub fn bilinear_resize_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    let os = gy.shape();
    let ty = linear_taps(input.height, os.height);
    let tx = linear_taps(input.width, os.width);
    let mut gx = Tensor::zeros(input);
    let mut tmp = vec![T::zero(); input.height * os.width];
    for n in 0..input.batch {
        for c in 0..input.channels {
            tmp.fill(T::zero());
            let g = gy.channel_plane(n, c);
            for (o, t) in ty.iter().enumerate() {
                let (w0, w1) = (T::from_f64_lossy(t.w0), T::from_f64_lossy(t.w1));
                for q in 0..os.width {
                    let v = g[o * os.width + q];
                    tmp[t.i0 * os.width + q] = tmp[t.i0 * os.width + q] + v * w0;
                    tmp[t.i1 * os.width + q] = tmp[t.i1 * os.width + q] + v * w1;
                }
            }
            let off = gx.offset(n, c, 0, 0);
            let dst = &mut gx.data_mut()[off..off + input.plane()];
            for r in 0..input.height {
                for (o, t) in tx.iter().enumerate() {
                    let v = tmp[r * os.width + o];
                    dst[r * input.width + t.i0] = dst[r * input.width + t.i0] + v * T::from_f64_lossy(t.w0);
                    dst[r * input.width + t.i1] = dst[r * input.width + t.i1] + v * T::from_f64_lossy(t.w1);
                }
            }
        }
    }
    gx
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    bilinear_resize(x, 2 * s.height, 2 * s.width)
}

pub fn upsample2_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Tensor<T> {
    bilinear_resize_backward(input, gy)
}

// ---------------------------------------------------------------------------
// channel concatenation

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?.shape();
    for x in xs {
        if !x.shape().same_spatial(&first) {
            return Err(Error::shape(
                "concat",
                format!("{} does not match {} in batch/height/width", x.shape(), first),
            ));
        }
    }
    let channels = xs.iter().map(|x| x.shape().channels).sum();
    let os = first.with_channels(channels);
    let mut out = Vec::with_capacity(os.numel());
    for n in 0..first.batch {
        for x in xs {
            out.extend_from_slice(x.sample(n));
        }
    }
    Tensor::from_vec(os, out)
}

/// Splits a gradient by the channel boundaries of the concatenated inputs.
pub fn split_channels<T: Scalar>(gy: &Tensor<T>, parts: &[Shape]) -> Vec<Tensor<T>> {
    let mut outs: Vec<Tensor<T>> = parts.iter().map(|&s| Tensor::zeros(s)).collect();
    for n in 0..gy.shape().batch {
        let src = gy.sample(n);
        let mut at = 0;
        for o in outs.iter_mut() {
            let len = o.shape().sample_len();
            o.sample_mut(n).copy_from_slice(&src[at..at + len]);
            at += len;
        }
    }
    outs
}

// ---------------------------------------------------------------------------
// soft Dice

/// Sums needed by the soft Dice loss and its gradient.
#[derive(Debug, Clone, Copy)]
pub struct DiceSums<T> {
    pub intersection: T,
    pub pred: T,
    pub truth: T,
}

pub fn dice_sums<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<DiceSums<T>> {
    if p.shape() != g.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("prediction {} vs truth {}", p.shape(), g.shape()),
        ));
    }
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut sg = T::zero();
    for (&a, &b) in p.data().iter().zip(g.data()) {
        inter = inter + a * b;
        sp = sp + a;
        sg = sg + b;
    }
    Ok(DiceSums {
        intersection: inter,
        pred: sp,
        truth: sg,
    })
}

/// `1 - (2 * sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)` over every element.
pub fn soft_dice<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, smooth: T) -> Result<T> {
    let s = dice_sums(p, g)?;
    let two = T::one() + T::one();
    Ok(T::one() - (two * s.intersection + smooth) / (s.pred + s.truth + smooth))
}

pub fn soft_dice_backward<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, smooth: T, gy: T) -> Result<Tensor<T>> {
    let s = dice_sums(p, g)?;
    let two = T::one() + T::one();
    let num = two * s.intersection + smooth;
    let den = s.pred + s.truth + smooth;
    let den2 = den * den;
    Ok(g.map(|gv| -gy * (two * gv * den - num) / den2))
}
