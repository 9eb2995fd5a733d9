//! Bilinear resampling.
//!
//! With `align_corners = false` output pixel `d` samples source coordinate
//! `(d + 0.5) * in / out - 0.5`, clamped below at 0. With `align_corners = true`
//! the corner pixels of input and output coincide. Taps past the last row or
//! column are clamped to it.

use crate::error::{shape_err, Result};
use crate::exec::Execution;
use crate::tensor::{Real, Shape, Tensor};

struct AxisTaps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn axis_taps<T: Real>(in_len: usize, out_len: usize, align_corners: bool) -> AxisTaps<T> {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for d in 0..out_len {
        let src = if align_corners {
            if out_len == 1 {
                0.0
            } else {
                d as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
            }
        } else {
            ((d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0)
        };
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(T::from_f64_lossy(if hi == lo { 0.0 } else { src - lo as f64 }));
    }
    taps
}

pub fn resize_shape(input: Shape, out_h: usize, out_w: usize) -> Result<Shape> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("bilinear resize target must be >= 1x1, got {out_h}x{out_w}"));
    }
    Ok(input.with_hw(out_h, out_w))
}

pub fn bilinear_forward<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
    exec: Execution,
) -> Result<Tensor<T>> {
    let is = input.shape();
    let os = resize_shape(is, out_h, out_w)?;
    if os == is {
        return Ok(input.clone());
    }
    let ty = axis_taps::<T>(is.h, out_h, align_corners);
    let tx = axis_taps::<T>(is.w, out_w, align_corners);
    let x = input.data();
    let mut out = vec![T::zero(); os.numel()];
    exec.for_each_plane(&mut out, os.plane(), |p, plane| {
        let src = &x[p * is.plane()..][..is.plane()];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            let r0 = &src[y0 * is.w..][..is.w];
            let r1 = &src[y1 * is.w..][..is.w];
            let row = &mut plane[oy * out_w..][..out_w];
            for (ox, o) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (T::one() - fx) + r1[x1] * fx;
                *o = top * (T::one() - fy) + bottom * fy;
            }
        }
    });
    Ok(Tensor::from_vec_unchecked(os, out))
}

/// Scatters `grad_out` back through the interpolation weights.
pub fn bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
    align_corners: bool,
    exec: Execution,
) -> Tensor<T> {
    let os = grad_out.shape();
    if os == input_shape {
        return grad_out.clone();
    }
    let ty = axis_taps::<T>(input_shape.h, os.h, align_corners);
    let tx = axis_taps::<T>(input_shape.w, os.w, align_corners);
    let g = grad_out.data();
    let iw = input_shape.w;
    let mut gin = vec![T::zero(); input_shape.numel()];
    exec.for_each_plane(&mut gin, input_shape.plane(), |p, plane| {
        let gp = &g[p * os.plane()..][..os.plane()];
        for oy in 0..os.h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..os.w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = gp[oy * os.w + ox];
                let top = v * (T::one() - fy);
                let bottom = v * fy;
                plane[y0 * iw + x0] = plane[y0 * iw + x0] + top * (T::one() - fx);
                plane[y0 * iw + x1] = plane[y0 * iw + x1] + top * fx;
                plane[y1 * iw + x0] = plane[y1 * iw + x0] + bottom * (T::one() - fx);
                plane[y1 * iw + x1] = plane[y1 * iw + x1] + bottom * fx;
            }
        }
    });
    Tensor::from_vec_unchecked(input_shape, gin)
}
