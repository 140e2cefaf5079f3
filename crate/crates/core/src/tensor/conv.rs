//! Real-valued convolution kernels (cross-correlation, no kernel flip).
//!
//! Dense convolutions go through im2col and a GEMM; depthwise convolutions
//! are direct loops.

use super::gemm::{gemm, Layout};
use super::{ConvGeometry, Padding, Real, RealTensor, Shape4};
use crate::error::{shape_mismatch, Result};

fn check_square_kernel(op: &'static str, w: Shape4) -> Result<usize> {
    if w.h != w.w {
        return Err(shape_mismatch(op, format!("kernel must be square, got {w}")));
    }
    Ok(w.h)
}

pub fn conv2d_geometry(
    x: Shape4,
    w: Shape4,
    stride: usize,
    padding: Padding,
) -> Result<(Shape4, ConvGeometry)> {
    let k = check_square_kernel("conv2d", w)?;
    if w.c != x.c {
        return Err(shape_mismatch(
            "conv2d",
            format!("input has {} channels, kernel {w} expects {}", x.c, w.c),
        ));
    }
    let g = padding.geometry(x.h, x.w, k, stride)?;
    Ok((
        Shape4 {
            n: x.n,
            c: w.n,
            h: g.out_h,
            w: g.out_w,
        },
        g,
    ))
}

/// Unrolls one batch item into a `(C·k·k) × (Ho·Wo)` matrix.
fn im2col(x: &[Real], c_in: usize, g: &ConvGeometry, pad: Real, cols: &mut [Real]) {
    let k = g.k;
    let plane_out = g.out_h * g.out_w;
    for ci in 0..c_in {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.in_y(oy, ky) {
                        None => out_row.fill(pad),
                        Some(iy) => {
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, d) in out_row.iter_mut().enumerate() {
                                *d = match g.in_x(ox, kx) {
                                    Some(ix) => src[ix],
                                    None => pad,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatters column gradients back onto the input (padding taps dropped).
fn col2im(cols: &[Real], c_in: usize, g: &ConvGeometry, dx: &mut [Real]) {
    let k = g.k;
    let plane_out = g.out_h * g.out_w;
    for ci in 0..c_in {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..g.out_h {
                    let Some(iy) = g.in_y(oy, ky) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.in_x(ox, kx) {
                            plane[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: (N, C_in, H, W)`, `w: (C_out, C_in, k, k)`.
pub fn conv2d(x: &RealTensor, w: &RealTensor, stride: usize, padding: Padding) -> Result<RealTensor> {
    let (out_shape, g) = conv2d_geometry(x.shape(), w.shape(), stride, padding)?;
    let xs = x.shape();
    let c_out = w.shape().n;
    let kdim = xs.c * g.k * g.k;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0; out_shape.len()];
    let mut cols = vec![0.0; kdim * plane_out];
    for n in 0..xs.n {
        im2col(
            &x.data()[n * xs.item()..(n + 1) * xs.item()],
            xs.c,
            &g,
            padding.pad_value(),
            &mut cols,
        );
        let dst = &mut out[n * c_out * plane_out..(n + 1) * c_out * plane_out];
        gemm(c_out, kdim, plane_out, w.data(), Layout::Normal, &cols, Layout::Normal, dst, 0.0);
    }
    Ok(RealTensor::from_parts(out_shape, out))
}

/// Gradients of [`conv2d`] w.r.t. input and kernel.
pub fn conv2d_backward(
    x: &RealTensor,
    w: &RealTensor,
    grad_out: &[Real],
    stride: usize,
    padding: Padding,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Vec<Real>>, Option<Vec<Real>>)> {
    let (out_shape, g) = conv2d_geometry(x.shape(), w.shape(), stride, padding)?;
    let xs = x.shape();
    let c_out = w.shape().n;
    let kdim = xs.c * g.k * g.k;
    let plane_out = g.out_h * g.out_w;
    debug_assert_eq!(grad_out.len(), out_shape.len());
    let mut dx = need_dx.then(|| vec![0.0; xs.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; kdim * plane_out];
    for n in 0..xs.n {
        let go = &grad_out[n * c_out * plane_out..(n + 1) * c_out * plane_out];
        if let Some(dw) = dw.as_mut() {
            im2col(
                &x.data()[n * xs.item()..(n + 1) * xs.item()],
                xs.c,
                &g,
                padding.pad_value(),
                &mut cols,
            );
            // dW += dOut · colsᵀ
            gemm(c_out, plane_out, kdim, go, Layout::Normal, &cols, Layout::Transposed, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dOut
            gemm(kdim, c_out, plane_out, w.data(), Layout::Transposed, go, Layout::Normal, &mut cols, 0.0);
            col2im(&cols, xs.c, &g, &mut dx[n * xs.item()..(n + 1) * xs.item()]);
        }
    }
    Ok((dx, dw))
}

pub fn depthwise_geometry(
    x: Shape4,
    w: Shape4,
    multiplier: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Shape4, ConvGeometry)> {
    let k = check_square_kernel("depthwise_conv2d", w)?;
    if multiplier == 0 {
        return Err(shape_mismatch("depthwise_conv2d", "multiplier must be positive"));
    }
    if w.c != 1 || w.n != x.c * multiplier {
        return Err(shape_mismatch(
            "depthwise_conv2d",
            format!(
                "kernel {w} does not match {} channels with multiplier {multiplier}",
                x.c
            ),
        ));
    }
    let g = padding.geometry(x.h, x.w, k, stride)?;
    Ok((
        Shape4 {
            n: x.n,
            c: w.n,
            h: g.out_h,
            w: g.out_w,
        },
        g,
    ))
}

/// Depthwise convolution: output channel `c·multiplier + m` filters input
/// channel `c` with kernel `w[c·multiplier + m]`. `w: (multiplier·C, 1, k, k)`.
pub fn depthwise_conv2d(
    x: &RealTensor,
    w: &RealTensor,
    multiplier: usize,
    stride: usize,
    padding: Padding,
) -> Result<RealTensor> {
    let (out_shape, g) = depthwise_geometry(x.shape(), w.shape(), multiplier, stride, padding)?;
    let xs = x.shape();
    let k = g.k;
    let pad = padding.pad_value();
    let mut out = vec![0.0; out_shape.len()];
    let plane_out = g.out_h * g.out_w;
    for n in 0..xs.n {
        for o in 0..out_shape.c {
            let src = x.channel(n, o / multiplier);
            let kern = &w.data()[o * k * k..(o + 1) * k * k];
            let dst = &mut out[(n * out_shape.c + o) * plane_out..][..plane_out];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = g.in_y(oy, ky);
                        for kx in 0..k {
                            let v = match (iy, g.in_x(ox, kx)) {
                                (Some(iy), Some(ix)) => src[iy * xs.w + ix],
                                _ => pad,
                            };
                            acc += v * kern[ky * k + kx];
                        }
                    }
                    dst[oy * g.out_w + ox] = acc;
                }
            }
        }
    }
    Ok(RealTensor::from_parts(out_shape, out))
}

pub fn depthwise_conv2d_backward(
    x: &RealTensor,
    w: &RealTensor,
    grad_out: &[Real],
    multiplier: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Vec<Real>, Vec<Real>)> {
    let (out_shape, g) = depthwise_geometry(x.shape(), w.shape(), multiplier, stride, padding)?;
    let xs = x.shape();
    let k = g.k;
    let pad = padding.pad_value();
    let plane_in = xs.plane();
    let plane_out = g.out_h * g.out_w;
    let mut dx = vec![0.0; xs.len()];
    let mut dw = vec![0.0; w.len()];
    for n in 0..xs.n {
        for o in 0..out_shape.c {
            let ci = o / multiplier;
            let src = x.channel(n, ci);
            let kern = &w.data()[o * k * k..(o + 1) * k * k];
            let go = &grad_out[(n * out_shape.c + o) * plane_out..][..plane_out];
            let dkern = &mut dw[o * k * k..(o + 1) * k * k];
            let dsrc = &mut dx[(n * xs.c + ci) * plane_in..][..plane_in];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gv = go[oy * g.out_w + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = g.in_y(oy, ky);
                        for kx in 0..k {
                            match (iy, g.in_x(ox, kx)) {
                                (Some(iy), Some(ix)) => {
                                    dkern[ky * k + kx] += gv * src[iy * xs.w + ix];
                                    dsrc[iy * xs.w + ix] += gv * kern[ky * k + kx];
                                }
                                _ => dkern[ky * k + kx] += gv * pad,
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}
