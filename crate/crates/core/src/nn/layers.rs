//! Forward and backward passes for the individual layer types.
//!
//! Batched work is split per sample with rayon; anything reduced across the
//! batch (weight and bias gradients) is summed afterwards in sample order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::{NnError, Tensor};

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

/// Adds `scale * src[kx - 1 + ox]` into `dst[ox]` for every valid column of a
/// zero-padded row, where `kx` is the kernel column.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], kx: usize, scale: f64) {
    let w = dst.len();
    match kx {
        0 => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += scale * s),
        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s),
        _ => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += scale * s),
    }
}

/// Sum of `a[ox] * b[ox + kx - 1]` over valid columns.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], kx: usize) -> f64 {
    let w = a.len();
    match kx {
        0 => a[1..].iter().zip(&b[..w - 1]).map(|(x, y)| x * y).sum(),
        1 => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        _ => a[..w - 1].iter().zip(&b[1..]).map(|(x, y)| x * y).sum(),
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, bias_len: usize) -> Result<(usize, usize, usize, usize, usize), NnError> {
    let (n, c_in, h, wd) = x.nchw()?;
    let (c_out, wc_in, kh, kw) = w.nchw()?;
    if wc_in != c_in || kh != 3 || kw != 3 {
        return Err(shape_err(format!(
            "conv weights {:?} do not fit input with {c_in} channels",
            w.shape()
        )));
    }
    if bias_len != c_out {
        return Err(shape_err(format!("conv bias has {bias_len} entries, expected {c_out}")));
    }
    if h == 0 || wd == 0 {
        return Err(shape_err("conv input has an empty spatial dimension".into()));
    }
    Ok((n, c_in, c_out, h, wd))
}

/// 3x3 cross-correlation, zero padding 1, stride 1.
pub fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor, NnError> {
    let (n, c_in, c_out, h, wd) = check_conv_shapes(x, w, b.len())?;
    let plane = h * wd;
    let mut out = Tensor::zeros(&[n, c_out, h, wd]);
    let xs = x.data();
    let ws = w.data();
    out.data_mut()
        .par_chunks_mut(c_out * plane)
        .enumerate()
        .for_each(|(s, out_s)| {
            let x_s = &xs[s * c_in * plane..(s + 1) * c_in * plane];
            for co in 0..c_out {
                let o = &mut out_s[co * plane..(co + 1) * plane];
                o.fill(b[co]);
                for ci in 0..c_in {
                    let xin = &x_s[ci * plane..(ci + 1) * plane];
                    let k = &ws[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
                    for ky in 0..3 {
                        let (oy_lo, oy_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        for kx in 0..3 {
                            let kv = k[ky * 3 + kx];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - 1;
                                shifted_axpy(&mut o[oy * wd..(oy + 1) * wd], &xin[iy * wd..(iy + 1) * wd], kx, kv);
                            }
                        }
                    }
                }
            }
        });
    out.debug_check_finite("conv3x3 output");
    Ok(out)
}

/// Gradients of [`conv3x3_forward`] with respect to input, weights and bias.
pub fn conv3x3_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>), NnError> {
    let (n, c_in, c_out, h, wd) = check_conv_shapes(x, w, w.shape()[0])?;
    if grad_out.shape() != [n, c_out, h, wd] {
        return Err(shape_err(format!(
            "conv grad_out {:?} does not match output shape {:?}",
            grad_out.shape(),
            [n, c_out, h, wd]
        )));
    }
    let plane = h * wd;
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();
    let mut grad_x = Tensor::zeros(x.shape());
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = grad_x
        .data_mut()
        .par_chunks_mut(c_in * plane)
        .enumerate()
        .map(|(s, gx_s)| {
            let x_s = &xs[s * c_in * plane..(s + 1) * c_in * plane];
            let g_s = &gs[s * c_out * plane..(s + 1) * c_out * plane];
            let mut gw = vec![0.0; c_out * c_in * 9];
            let mut gb = vec![0.0; c_out];
            for co in 0..c_out {
                let g = &g_s[co * plane..(co + 1) * plane];
                gb[co] = g.iter().sum();
                for ci in 0..c_in {
                    let xin = &x_s[ci * plane..(ci + 1) * plane];
                    let gx = &mut gx_s[ci * plane..(ci + 1) * plane];
                    let base = (co * c_in + ci) * 9;
                    for ky in 0..3 {
                        let (oy_lo, oy_hi) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                        for kx in 0..3 {
                            let kv = ws[base + ky * 3 + kx];
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - 1;
                                let g_row = &g[oy * wd..(oy + 1) * wd];
                                acc += shifted_dot(g_row, &xin[iy * wd..(iy + 1) * wd], kx);
                                // grad_x[iy][ox + kx - 1] += kv * g[oy][ox]
                                let gx_row = &mut gx[iy * wd..(iy + 1) * wd];
                                shifted_axpy(gx_row, g_row, 2 - kx, kv);
                            }
                            gw[base + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_b = vec![0.0; c_out];
    for (gw, gb) in &per_sample {
        grad_w.data_mut().iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    grad_x.debug_check_finite("conv3x3 grad_x");
    Ok((grad_x, grad_w, grad_b))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes gradient where the forward input was strictly positive; the
/// gradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor, NnError> {
    if x.shape() != grad_out.shape() {
        return Err(shape_err(format!(
            "relu grad shape {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index of the first maximum in row-major
/// window order.
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xs = x.data();
    for (plane_idx, (o, a)) in out
        .data_mut()
        .chunks_mut(oh * ow)
        .zip(argmax.chunks_mut(oh * ow))
        .enumerate()
    {
        let base = plane_idx * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                o[oy * ow + ox] = xs[best];
                a[oy * ow + ox] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor, NnError> {
    if argmax.len() != grad_out.len() {
        return Err(shape_err("maxpool2 argmax does not match grad_out".into()));
    }
    let mut grad_x = Tensor::zeros(input_shape);
    let gx = grad_x.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Ok(grad_x)
}

/// `y = x W^T + b` for `x` of shape `(n, in)` and `W` of shape `(out, in)`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor, NnError> {
    let (n, n_in) = x.matrix()?;
    let (n_out, w_in) = w.matrix()?;
    if w_in != n_in || b.len() != n_out {
        return Err(shape_err(format!(
            "dense weights {:?} / bias {} do not fit input {:?}",
            w.shape(),
            b.len(),
            x.shape()
        )));
    }
    let ws = w.data();
    let mut out = Tensor::zeros(&[n, n_out]);
    out.data_mut()
        .par_chunks_mut(n_out)
        .zip(x.data().par_chunks(n_in))
        .for_each(|(y, xr)| {
            for (o, yv) in y.iter_mut().enumerate() {
                let row = &ws[o * n_in..(o + 1) * n_in];
                *yv = b[o] + row.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        });
    out.debug_check_finite("dense output");
    Ok(out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>), NnError> {
    let (n, n_in) = x.matrix()?;
    let (n_out, w_in) = w.matrix()?;
    if w_in != n_in || grad_out.shape() != [n, n_out] {
        return Err(shape_err(format!(
            "dense grad_out {:?} does not fit x {:?} / W {:?}",
            grad_out.shape(),
            x.shape(),
            w.shape()
        )));
    }
    let (xs, ws, gs) = (x.data(), w.data(), grad_out.data());
    let mut grad_x = Tensor::zeros(&[n, n_in]);
    for (s, gx) in grad_x.data_mut().chunks_mut(n_in).enumerate() {
        for o in 0..n_out {
            let g = gs[s * n_out + o];
            gx.iter_mut()
                .zip(&ws[o * n_in..(o + 1) * n_in])
                .for_each(|(a, wv)| *a += g * wv);
        }
    }
    let mut grad_w = Tensor::zeros(&[n_out, n_in]);
    let mut grad_b = vec![0.0; n_out];
    for s in 0..n {
        let xr = &xs[s * n_in..(s + 1) * n_in];
        for o in 0..n_out {
            let g = gs[s * n_out + o];
            grad_b[o] += g;
            grad_w.data_mut()[o * n_in..(o + 1) * n_in]
                .iter_mut()
                .zip(xr)
                .for_each(|(a, xv)| *a += g * xv);
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Mean cross-entropy of softmax(logits) against integer labels, and its
/// gradient `(softmax - onehot) / n`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NnError> {
    let (n, k) = logits.matrix()?;
    if labels.len() != n {
        return Err(shape_err(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(shape_err(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.data_mut().chunks_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - row[label];
        for (c, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_norm).exp();
            *gv = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}
