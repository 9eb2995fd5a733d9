//! Direct 2-D cross-correlation with zero padding.
//!
//! Weights are laid out `(c_out, c_in, kh, kw)` in a [`Shape`] whose `n` is
//! `c_out`. Biases are `(1, c_out, 1, 1)`.

use crate::error::{shape_err, Result};
use crate::exec::Execution;
use crate::tensor::{Real, Shape, Tensor};

/// Output extent of a convolution along one axis, or `None` if it would be < 1.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Validates operand shapes and returns the output shape.
pub fn conv2d_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: usize,
) -> Result<Shape> {
    if stride == 0 {
        return Err(shape_err!("conv2d stride must be >= 1"));
    }
    if input.c != weight.c {
        return Err(shape_err!(
            "conv2d input has {} channels but weight {} expects c_in = {}",
            input.c,
            weight,
            weight.c
        ));
    }
    if let Some(b) = bias {
        if b != Shape::new(1, weight.n, 1, 1) {
            return Err(shape_err!("conv2d bias {b} does not match c_out = {}", weight.n));
        }
    }
    let oh = conv_out_dim(input.h, weight.h, stride, padding);
    let ow = conv_out_dim(input.w, weight.w, stride, padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(input.n, weight.n, oh, ow)),
        _ => Err(shape_err!(
            "conv2d on {}x{} input with {}x{} kernel, stride {stride}, padding {padding} gives a non-positive output",
            input.h,
            input.w,
            weight.h,
            weight.w
        )),
    }
}

/// Range of output indices whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // in = o * stride + k - padding
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if len + padding > k { (len + padding - k).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi.min(out_len))
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    exec: Execution,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_shape(input.shape(), weight.shape(), bias.map(|b| b.shape()), stride, padding)?;
    let is = input.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let x = input.data();
    let wt = weight.data();
    let b = bias.map(|b| b.data());
    let mut out = vec![T::zero(); out_shape.numel()];

    exec.for_each_plane(&mut out, oh * ow, |plane_idx, plane| {
        let n = plane_idx / ws.n;
        let co = plane_idx % ws.n;
        if let Some(b) = b {
            plane.fill(b[co]);
        }
        for ci in 0..is.c {
            let xin = &x[(n * is.c + ci) * is.plane()..][..is.plane()];
            let wk = &wt[(co * ws.c + ci) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(is.h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let wv = wk[ky * kw + kx];
                    let (ox0, ox1) = valid_range(is.w, ow, kx, stride, padding);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let row_in = &xin[iy * is.w..][..is.w];
                        let row_out = &mut plane[oy * ow..][..ow];
                        if stride == 1 {
                            let ix0 = ox0 + kx - padding;
                            let src = &row_in[ix0..ix0 + (ox1 - ox0)];
                            for (o, &v) in row_out[ox0..ox1].iter_mut().zip(src) {
                                *o = *o + wv * v;
                            }
                        } else {
                            for (ox, o) in row_out.iter_mut().enumerate().take(ox1).skip(ox0) {
                                *o = *o + wv * row_in[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_vec_unchecked(out_shape, out))
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: Shape,
    stride: usize,
    padding: usize,
    exec: Execution,
) -> Tensor<T> {
    let gs = grad_out.shape();
    let ws = weight.shape();
    let (kh, kw) = (ws.h, ws.w);
    let (oh, ow) = (gs.h, gs.w);
    let g = grad_out.data();
    let wt = weight.data();
    let mut gin = vec![T::zero(); input_shape.numel()];

    exec.for_each_plane(&mut gin, input_shape.plane(), |plane_idx, plane| {
        let n = plane_idx / input_shape.c;
        let ci = plane_idx % input_shape.c;
        for co in 0..ws.n {
            let gplane = &g[(n * gs.c + co) * oh * ow..][..oh * ow];
            let wk = &wt[(co * ws.c + ci) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(input_shape.h, oh, ky, stride, padding);
                for kx in 0..kw {
                    let wv = wk[ky * kw + kx];
                    let (ox0, ox1) = valid_range(input_shape.w, ow, kx, stride, padding);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let grow = &gplane[oy * ow..][..ow];
                        let irow = &mut plane[iy * input_shape.w..][..input_shape.w];
                        for (ox, &gv) in grow.iter().enumerate().take(ox1).skip(ox0) {
                            let ix = ox * stride + kx - padding;
                            irow[ix] = irow[ix] + wv * gv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec_unchecked(input_shape, gin)
}

/// Gradient with respect to the convolution weight.
pub fn conv2d_backward_weight<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: Shape,
    stride: usize,
    padding: usize,
    exec: Execution,
) -> Tensor<T> {
    let gs = grad_out.shape();
    let is = input.shape();
    let (kh, kw) = (weight_shape.h, weight_shape.w);
    let (oh, ow) = (gs.h, gs.w);
    let g = grad_out.data();
    let x = input.data();
    let mut gw = vec![T::zero(); weight_shape.numel()];

    exec.for_each_plane(&mut gw, kh * kw, |idx, kernel| {
        let co = idx / weight_shape.c;
        let ci = idx % weight_shape.c;
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(is.h, oh, ky, stride, padding);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(is.w, ow, kx, stride, padding);
                let mut acc = T::zero();
                for n in 0..is.n {
                    let gplane = &g[(n * gs.c + co) * oh * ow..][..oh * ow];
                    let xin = &x[(n * is.c + ci) * is.plane()..][..is.plane()];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let grow = &gplane[oy * ow..][..ow];
                        let xrow = &xin[iy * is.w..][..is.w];
                        for ox in ox0..ox1 {
                            acc = acc + grow[ox] * xrow[ox * stride + kx - padding];
                        }
                    }
                }
                kernel[ky * kw + kx] = acc;
            }
        }
    });
    Tensor::from_vec_unchecked(weight_shape, gw)
}

/// Gradient with respect to the bias: per-channel sums of `grad_out`.
pub fn conv2d_backward_bias<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let gs = grad_out.shape();
    let g = grad_out.data();
    let mut gb = vec![T::zero(); gs.c];
    for n in 0..gs.n {
        for (co, acc) in gb.iter_mut().enumerate() {
            let plane = &g[(n * gs.c + co) * gs.plane()..][..gs.plane()];
            *acc = plane.iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::from_vec_unchecked(Shape::new(1, gs.c, 1, 1), gb)
}
