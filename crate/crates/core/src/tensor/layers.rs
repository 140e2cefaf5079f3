//! Forward/backward kernels for the non-convolution layers.

use super::gemm::{gemm, Layout};
use super::{Real, RealTensor, Shape4};
use crate::error::{shape_mismatch, Error, Result};

pub const BN_EPS: Real = 1e-5;

fn per_channel_len(op: &'static str, p: &RealTensor, c: usize) -> Result<()> {
    if p.len() != c {
        return Err(shape_mismatch(
            op,
            format!("parameter of {} elements for {c} channels", p.len()),
        ));
    }
    Ok(())
}

/// Batch mean and biased variance per channel over N, H, W.
pub fn channel_moments(x: &RealTensor) -> (Vec<Real>, Vec<Real>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as Real;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += x.channel(n, c).iter().sum::<Real>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x.channel(n, c).iter().map(|v| (v - m) * (v - m)).sum::<Real>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// `gamma·(x − mean)/sqrt(var + eps) + beta` with given statistics.
pub fn batchnorm_apply(
    x: &RealTensor,
    gamma: &RealTensor,
    beta: &RealTensor,
    mean: &[Real],
    var: &[Real],
) -> Result<RealTensor> {
    let s = x.shape();
    per_channel_len("batchnorm", gamma, s.c)?;
    per_channel_len("batchnorm", beta, s.c)?;
    if mean.len() != s.c || var.len() != s.c {
        return Err(shape_mismatch("batchnorm", "statistics length"));
    }
    let mut out = x.data().to_vec();
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            let scale = gamma.data()[c] * inv;
            let shift = beta.data()[c] - mean[c] * scale;
            for v in &mut out[(n * s.c + c) * p..][..p] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(RealTensor::from_parts(s, out))
}

pub struct BatchNormGrads {
    pub dx: Vec<Real>,
    pub dgamma: Vec<Real>,
    pub dbeta: Vec<Real>,
}

/// Backward of batchnorm. With `batch_stats` the statistics are treated as
/// functions of `x` (training mode); otherwise as constants.
pub fn batchnorm_backward(
    x: &RealTensor,
    gamma: &RealTensor,
    mean: &[Real],
    var: &[Real],
    grad_out: &[Real],
    batch_stats: bool,
) -> BatchNormGrads {
    let s = x.shape();
    let p = s.plane();
    let count = (s.n * p) as Real;
    let mut dx = vec![0.0; s.len()];
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let g = gamma.data()[c];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..s.n {
            let off = (n * s.c + c) * p;
            for i in 0..p {
                let xhat = (x.data()[off + i] - mean[c]) * inv;
                sum_g += grad_out[off + i];
                sum_gx += grad_out[off + i] * xhat;
            }
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        for n in 0..s.n {
            let off = (n * s.c + c) * p;
            for i in 0..p {
                let go = grad_out[off + i];
                dx[off + i] = if batch_stats {
                    let xhat = (x.data()[off + i] - mean[c]) * inv;
                    g * inv * (go - sum_g / count - xhat * sum_gx / count)
                } else {
                    g * inv * go
                };
            }
        }
    }
    BatchNormGrads { dx, dgamma, dbeta }
}

/// Per-channel PReLU: `x` if positive, otherwise `slope[c]·x`.
pub fn prelu(x: &RealTensor, slope: &RealTensor) -> Result<RealTensor> {
    let s = x.shape();
    per_channel_len("prelu", slope, s.c)?;
    let p = s.plane();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        if *v <= 0.0 {
            *v *= slope.data()[(i / p) % s.c];
        }
    }
    Ok(RealTensor::from_parts(s, out))
}

pub fn prelu_backward(x: &RealTensor, slope: &RealTensor, grad_out: &[Real]) -> (Vec<Real>, Vec<Real>) {
    let s = x.shape();
    let p = s.plane();
    let mut dx = vec![0.0; s.len()];
    let mut ds = vec![0.0; s.c];
    for (i, (&v, &g)) in x.data().iter().zip(grad_out).enumerate() {
        let c = (i / p) % s.c;
        if v > 0.0 {
            dx[i] = g;
        } else {
            dx[i] = g * slope.data()[c];
            ds[c] += g * v;
        }
    }
    (dx, ds)
}

/// Max pooling with a k×k window, given stride and symmetric zero-count
/// padding (padded cells never win). Returns the output and, per output
/// element, the flat input index of the winner.
pub fn maxpool(x: &RealTensor, k: usize, stride: usize, pad: usize) -> Result<(RealTensor, Vec<usize>)> {
    let s = x.shape();
    if k == 0 || stride == 0 || s.h + 2 * pad < k || s.w + 2 * pad < k {
        return Err(shape_mismatch("maxpool", format!("window {k} on {s}")));
    }
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let out_shape = Shape4 { h: oh, w: ow, ..s };
    let mut out = Vec::with_capacity(out_shape.len());
    let mut arg = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = usize::MAX;
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
                            let i = base + iy as usize * s.w + ix as usize;
                            if x.data()[i] > best {
                                best = x.data()[i];
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
    Ok((RealTensor::from_parts(out_shape, out), arg))
}

/// 2×2 average pooling, stride 2, ceil mode: a partial window at the
/// bottom/right edge averages only the cells it covers.
pub fn avgpool2(x: &RealTensor) -> RealTensor {
    let s = x.shape();
    let oh = s.h.div_ceil(2);
    let ow = s.w.div_ceil(2);
    let out_shape = Shape4 { h: oh, w: ow, ..s };
    RealTensor::from_fn(out_shape, |n, c, oy, ox| {
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for y in 2 * oy..(2 * oy + 2).min(s.h) {
            for xx in 2 * ox..(2 * ox + 2).min(s.w) {
                sum += x.at(n, c, y, xx);
                cnt += 1.0;
            }
        }
        sum / cnt
    })
}

pub fn avgpool2_backward(in_shape: Shape4, grad_out: &[Real]) -> Vec<Real> {
    let s = in_shape;
    let oh = s.h.div_ceil(2);
    let ow = s.w.div_ceil(2);
    let mut dx = vec![0.0; s.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let ys = 2 * oy..(2 * oy + 2).min(s.h);
                    let xs = 2 * ox..(2 * ox + 2).min(s.w);
                    let cnt = (ys.len() * xs.len()) as Real;
                    let g = grad_out[((n * s.c + c) * oh + oy) * ow + ox] / cnt;
                    for y in ys {
                        for xx in xs.clone() {
                            dx[s.index(n, c, y, xx)] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &RealTensor) -> RealTensor {
    let s = x.shape();
    let p = s.plane() as Real;
    let data = x.data().chunks(s.plane()).map(|ch| ch.iter().sum::<Real>() / p).collect();
    RealTensor::from_parts(Shape4 { h: 1, w: 1, ..s }, data)
}

/// Fully connected layer over the flattened C·H·W features.
/// `w: (out, features, 1, 1)`, `b: (1, out, 1, 1)`; output `(N, out, 1, 1)`.
pub fn dense(x: &RealTensor, w: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let s = x.shape();
    let ws = w.shape();
    let features = s.item();
    if ws.c * ws.h * ws.w != features || b.len() != ws.n {
        return Err(shape_mismatch(
            "dense",
            format!("input {s} with weights {ws} and bias of {}", b.len()),
        ));
    }
    let mut out = Vec::with_capacity(s.n * ws.n);
    for _ in 0..s.n {
        out.extend_from_slice(b.data());
    }
    gemm(s.n, features, ws.n, x.data(), Layout::Normal, w.data(), Layout::Transposed, &mut out, 1.0);
    Ok(RealTensor::from_parts(Shape4::new(s.n, ws.n, 1, 1)?, out))
}

pub fn dense_backward(
    x: &RealTensor,
    w: &RealTensor,
    grad_out: &[Real],
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let n = x.shape().n;
    let features = x.shape().item();
    let outs = w.shape().n;
    let mut dx = vec![0.0; x.len()];
    gemm(n, outs, features, grad_out, Layout::Normal, w.data(), Layout::Normal, &mut dx, 0.0);
    let mut dw = vec![0.0; w.len()];
    gemm(outs, n, features, grad_out, Layout::Transposed, x.data(), Layout::Normal, &mut dw, 0.0);
    let mut db = vec![0.0; outs];
    for row in grad_out.chunks(outs) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax of `(N, K, 1, 1)` logits.
pub fn softmax(logits: &RealTensor) -> Vec<Real> {
    let k = logits.shape().item();
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let exps: Vec<Real> = row.iter().map(|v| (v - max).exp()).collect();
        let z: Real = exps.iter().sum();
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    probs
}

/// Mean cross-entropy over the batch; also returns the softmax probabilities.
pub fn softmax_cross_entropy(logits: &RealTensor, labels: &[usize]) -> Result<(Real, Vec<Real>)> {
    let s = logits.shape();
    let k = s.item();
    if labels.len() != s.n {
        return Err(shape_mismatch(
            "softmax_cross_entropy",
            format!("{} labels for batch of {}", labels.len(), s.n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} for {k} classes")));
    }
    let probs = softmax(logits);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            // `max` would swallow a NaN probability.
            let p = probs[i * k + l];
            if p.is_nan() {
                p
            } else {
                -p.max(1e-300).ln()
            }
        })
        .sum::<Real>()
        / s.n as Real;
    Ok((loss, probs))
}
