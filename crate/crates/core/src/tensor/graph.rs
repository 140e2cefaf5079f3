//! Eager, tape-based reverse-mode autodiff.
//!
//! Every op evaluates immediately and appends a node to the tape. A node can
//! only reference nodes that already exist, so the tape is always in
//! topological order and cannot contain cycles. [`Graph::backward`] walks the
//! tape once in reverse, accumulating first-order gradients.

use super::conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward};
use super::layers::{
    avgpool2, avgpool2_backward, batchnorm_apply, batchnorm_backward, channel_moments, dense,
    dense_backward, global_avg_pool, maxpool, prelu, prelu_backward, softmax_cross_entropy,
};
use super::{Padding, Real, RealTensor, Shape4};
use crate::binarize::surrogate;
use crate::error::{shape_mismatch, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics; gradients flow through them.
    Train,
    /// Normalize with fixed running statistics.
    Infer { mean: &'a [Real], var: &'a [Real] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Sum(Var),
    AddChannelBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        x: Var,
        w: Var,
        multiplier: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<Real>,
        var: Vec<Real>,
        batch_stats: bool,
    },
    Prelu(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Real>,
    },
    SignSte(Var),
    PairSelect {
        logits: Var,
        beta: Var,
    },
    MarginSte {
        x: Var,
        margins: Vec<Real>,
    },
}

#[derive(Debug)]
struct Node {
    value: RealTensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn push(&mut self, value: RealTensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; it receives a gradient from [`Graph::backward`].
    pub fn leaf(&mut self, value: RealTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input; no gradient is tracked.
    pub fn constant(&mut self, value: RealTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes.get(v.0)?.value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> RealTensor {
        std::mem::replace(&mut self.nodes[v.0].value, RealTensor::scalar(0.0))
    }

    /// Batch mean and biased variance used by a training-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[Real], &[Real])> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa != sb {
            return Err(shape_mismatch(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = RealTensor::from_parts(self.shape(a), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = RealTensor::from_parts(self.shape(a), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Result<Var> {
        let out = self.check(a)?.value.map(|v| v * s);
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.check(a)?.value.data().iter().sum();
        Ok(self.push(RealTensor::scalar(total), Op::Sum(a), &[a]))
    }

    /// Adds `b[c]` (shape `(1, C, 1, 1)`) to every element of channel `c`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.check(x)?.value.shape();
        if self.check(b)?.value.len() != s.c {
            return Err(shape_mismatch("add_channel_bias", format!("bias for {} channels", s.c)));
        }
        let bias = self.value(b).data();
        let p = s.plane();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / p) % s.c])
            .collect();
        Ok(self.push(RealTensor::from_parts(s, data), Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = conv2d(&self.check(x)?.value, &self.check(w)?.value, stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            &[x, w],
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        multiplier: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let out = depthwise_conv2d(
            &self.check(x)?.value,
            &self.check(w)?.value,
            multiplier,
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Depthwise {
                x,
                w,
                multiplier,
                stride,
                padding,
            },
            &[x, w],
        ))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>) -> Result<Var> {
        let xv = &self.check(x)?.value;
        self.check(gamma)?;
        self.check(beta)?;
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train => {
                if xv.shape().n < 2 {
                    return Err(Error::BatchTooSmall(xv.shape().n));
                }
                let (m, v) = channel_moments(xv);
                (m, v, true)
            }
            BatchNormMode::Infer { mean, var } => (mean.to_vec(), var.to_vec(), false),
        };
        let out = batchnorm_apply(xv, self.value(gamma), self.value(beta), &mean, &var)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let out = prelu(&self.check(x)?.value, &self.check(slope)?.value)?;
        Ok(self.push(out, Op::Prelu(x, slope), &[x, slope]))
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = maxpool(&self.check(x)?.value, k, stride, pad)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        self.maxpool(x, 2, 2, 0)
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let out = avgpool2(&self.check(x)?.value);
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool(&self.check(x)?.value);
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = dense(&self.check(x)?.value, &self.check(w)?.value, &self.check(b)?.value)?;
        Ok(self.push(out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits; scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy(&self.check(logits)?.value, labels)?;
        Ok(self.push(
            RealTensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Sign binarization with the clipped straight-through estimator.
    /// `relaxed` replaces the hard forward with its surrogate `clamp(x, −1, 1)`.
    pub fn sign_ste(&mut self, x: Var, relaxed: bool) -> Result<Var> {
        let xv = &self.check(x)?.value;
        let out = if relaxed {
            xv.map(|v| v.clamp(-1.0, 1.0))
        } else {
            xv.map(|v| if v > 0.0 { 1.0 } else { -1.0 })
        };
        Ok(self.push(out, Op::SignSte(x), &[x]))
    }

    /// LAB classification of channel pairs `(2c, 2c+1)` of `(N, 2C, H, W)`
    /// logits into `(N, C, H, W)` ±1 values. The hard forward is the pairwise
    /// argmax (ties to −1); backward (and the `relaxed` forward) use the
    /// two-class soft-argmax lifted to ±1 with temperature `beta`.
    pub fn pair_select(&mut self, logits: Var, beta: Var, relaxed: bool) -> Result<Var> {
        let lv = &self.check(logits)?.value;
        let s = lv.shape();
        if s.c % 2 != 0 {
            return Err(shape_mismatch("pair_select", format!("odd channel count in {s}")));
        }
        let bv = &self.check(beta)?.value;
        if bv.len() != 1 {
            return Err(shape_mismatch("pair_select", "beta must be a scalar"));
        }
        let beta_v = bv.data()[0];
        let out_shape = s.with_c(s.c / 2);
        let p = s.plane();
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            for c in 0..out_shape.c {
                let z0 = lv.channel(n, 2 * c);
                let z1 = lv.channel(n, 2 * c + 1);
                for i in 0..p {
                    out.push(if relaxed {
                        surrogate(z0[i], z1[i], beta_v).value
                    } else if z1[i] > z0[i] {
                        1.0
                    } else {
                        -1.0
                    });
                }
            }
        }
        Ok(self.push(
            RealTensor::from_parts(out_shape, out),
            Op::PairSelect { logits, beta },
            &[logits, beta],
        ))
    }

    /// `+1 if margin > 0 else −1` for per-element margins `x − T` computed
    /// outside the tape (thresholds held constant). Backward is the clipped
    /// STE on the margin.
    pub fn margin_ste(&mut self, x: Var, margins: Vec<Real>, relaxed: bool) -> Result<Var> {
        let xv = &self.check(x)?.value;
        if margins.len() != xv.len() {
            return Err(shape_mismatch("margin_ste", "margin count"));
        }
        let data = margins
            .iter()
            .map(|&m| {
                if relaxed {
                    m.clamp(-1.0, 1.0)
                } else if m > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let out = RealTensor::from_parts(xv.shape(), data);
        Ok(self.push(out, Op::MarginSte { x, margins }, &[x]))
    }

    /// Reverse accumulation from a scalar `loss`. Afterwards every leaf holds
    /// a gradient (zeros when it does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.check(loss)?.value.shape();
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<Real>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.node_backward(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[Real]) -> Result<Vec<(Var, Vec<Real>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        Ok(match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::AddChannelBias(x, b) => {
                let s = val(*x).shape();
                let p = s.plane();
                let mut db = vec![0.0; s.c];
                for (j, gv) in g.iter().enumerate() {
                    db[(j / p) % s.c] += gv;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (dx, dw) =
                    conv2d_backward(val(*x), val(*w), g, *stride, *padding, wants(*x), wants(*w))?;
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
                out
            }
            Op::Depthwise {
                x,
                w,
                multiplier,
                stride,
                padding,
            } => {
                let (dx, dw) =
                    depthwise_conv2d_backward(val(*x), val(*w), g, *multiplier, *stride, *padding)?;
                vec![(*x, dx), (*w, dw)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                batch_stats,
            } => {
                let r = batchnorm_backward(val(*x), val(*gamma), mean, var, g, *batch_stats);
                vec![(*x, r.dx), (*gamma, r.dgamma), (*beta, r.dbeta)]
            }
            Op::Prelu(x, slope) => {
                let (dx, ds) = prelu_backward(val(*x), val(*slope), g);
                vec![(*x, dx), (*slope, ds)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (gv, &j) in g.iter().zip(argmax) {
                    dx[j] += gv;
                }
                vec![(*x, dx)]
            }
            Op::AvgPool2(x) => vec![(*x, avgpool2_backward(val(*x).shape(), g))],
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let p = s.plane();
                let mut dx = vec![0.0; s.len()];
                for (j, d) in dx.iter_mut().enumerate() {
                    *d = g[j / p] / p as Real;
                }
                vec![(*x, dx)]
            }
            Op::Dense { x, w, b } => {
                let (dx, dw, db) = dense_backward(val(*x), val(*w), g);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = val(*logits).shape();
                let k = s.item();
                let scale = g[0] / s.n as Real;
                let mut d: Vec<Real> = probs.iter().map(|p| p * scale).collect();
                for (n, &l) in labels.iter().enumerate() {
                    d[n * k + l] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::SignSte(x) => {
                let d = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v.abs() <= 1.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::PairSelect { logits, beta } => {
                let lv = val(*logits);
                let s = lv.shape();
                let half = s.c / 2;
                let p = s.plane();
                let beta_v = val(*beta).data()[0];
                let mut dz = vec![0.0; lv.len()];
                let mut dbeta = 0.0;
                for n in 0..s.n {
                    for c in 0..half {
                        let z0 = lv.channel(n, 2 * c);
                        let z1 = lv.channel(n, 2 * c + 1);
                        let o0 = (n * s.c + 2 * c) * p;
                        let o1 = (n * s.c + 2 * c + 1) * p;
                        let og = (n * half + c) * p;
                        for j in 0..p {
                            let sg = surrogate(z0[j], z1[j], beta_v);
                            let gv = g[og + j];
                            dz[o1 + j] = gv * sg.d_z1;
                            dz[o0 + j] = -gv * sg.d_z1;
                            dbeta += gv * sg.d_beta;
                        }
                    }
                }
                vec![(*logits, dz), (*beta, vec![dbeta])]
            }
            Op::MarginSte { x, margins } => {
                let d = margins
                    .iter()
                    .zip(g)
                    .map(|(&m, &gv)| if m.abs() <= 1.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
        })
    }
}
