//! Oracles shared by the integration tests.
#![allow(dead_code)]

use labnn::binarize::{lab_backward, lab_forward, lab_relaxed, LabParams};
use labnn::nets::BlockSpec;
use labnn::tensor::layers::softmax_cross_entropy;
use labnn::tensor::{BatchNormMode, Graph, Var};
use labnn::train::loss_and_grads;
use labnn::{BinarizerChoice, BitTensor, Mode, Model, ModelSpec, Padding, Real, RealTensor, Result, Shape4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).unwrap()
}

pub fn uniform(s: Shape4, lo: Real, hi: Real, r: &mut ChaCha8Rng) -> RealTensor {
    RealTensor::uniform(s, lo, hi, r)
}

pub fn random_bits(s: Shape4, r: &mut ChaCha8Rng) -> BitTensor {
    BitTensor::from_fn(s, |_, _, _, _| r.random())
}

/// Values with magnitude in `[lo, hi]` and random sign, kept away from the
/// kinks at 0 (PReLU) or at ±1 (clipped surrogates).
pub fn away_from(s: Shape4, lo: Real, hi: Real, r: &mut ChaCha8Rng) -> RealTensor {
    RealTensor::from_fn(s, |_, _, _, _| {
        let m = r.random_range(lo..hi);
        if r.random() {
            m
        } else {
            -m
        }
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradError {
    pub max_rel: Real,
    pub checked: usize,
}

impl GradError {
    fn record(&mut self, analytic: Real, numeric: Real) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

pub const FD_STEP: Real = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
pub const FD_FLOOR: Real = 1e-4;
pub const OP_TOLERANCE: Real = 1e-3;
pub const END_TO_END_TOLERANCE: Real = 5e-3;

pub fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn central(mut f: impl FnMut(Real) -> Real) -> Real {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

/// Checks the tape gradient of `Σ R ⊙ f(inputs)` (fixed random `R`) with
/// respect to every input element against central differences.
pub fn check_op(inputs: &[RealTensor], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> GradError {
    let build = |vals: &[RealTensor], leaves: bool, weight: Option<&RealTensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|v| if leaves { g.leaf(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        let y = f(&mut g, &vars).unwrap();
        let w = match weight {
            Some(w) => w.clone(),
            None => uniform(g.shape(y), -1.0, 1.0, &mut rng(seed)),
        };
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let l = g.sum(p).unwrap();
        (g, l, vars, w)
    };
    let (mut g, l, vars, weight) = build(inputs, true, None);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<Real>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let mut err = GradError::default();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let num = central(|d| {
                let mut vals = inputs.to_vec();
                vals[i].data_mut()[j] += d;
                let (g, l, _, _) = build(&vals, false, Some(&weight));
                g.value(l).data()[0]
            });
            err.record(a, num);
        }
    }
    err
}

/// Each graph op on small random operands, named for reporting.
pub fn op_gradient_suite() -> Vec<(String, GradError)> {
    let mut r = rng(0x5eed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: GradError| out.push((name.to_string(), e));
    let s = shape(2, 3, 4, 5);
    let (a, b) = (uniform(s, -1.0, 1.0, &mut r), uniform(s, -1.0, 1.0, &mut r));
    push("add", check_op(&[a.clone(), b.clone()], 1, |g, v| g.add(v[0], v[1])));
    push("mul", check_op(&[a.clone(), b.clone()], 2, |g, v| g.mul(v[0], v[1])));
    push("scale", check_op(std::slice::from_ref(&a), 3, |g, v| g.scale(v[0], -1.7)));
    push("sum", check_op(std::slice::from_ref(&a), 4, |g, v| g.sum(v[0])));
    let bias = uniform(shape(1, 3, 1, 1), -1.0, 1.0, &mut r);
    push("add_channel_bias", check_op(&[a.clone(), bias], 5, |g, v| g.add_channel_bias(v[0], v[1])));

    let x = uniform(shape(2, 3, 7, 6), -1.0, 1.0, &mut r);
    for (k, stride, pad) in [
        (3, 1, Padding::Valid),
        (3, 2, Padding::SAME_ZERO),
        (3, 1, Padding::SAME_MINUS_ONE),
        (2, 2, Padding::Same(1.0)),
        (1, 1, Padding::Valid),
        (5, 3, Padding::SAME_ZERO),
    ] {
        let w = uniform(shape(4, 3, k, k), -1.0, 1.0, &mut r);
        push(
            &format!("conv2d k{k} s{stride} {pad:?}"),
            check_op(&[x.clone(), w], 6, move |g, v| g.conv2d(v[0], v[1], stride, pad)),
        );
    }
    for (mult, stride, pad) in [(2, 1, Padding::SAME_ZERO), (1, 2, Padding::Valid), (2, 2, Padding::SAME_MINUS_ONE)] {
        let w = uniform(shape(3 * mult, 1, 3, 3), -1.0, 1.0, &mut r);
        push(
            &format!("depthwise m{mult} s{stride} {pad:?}"),
            check_op(&[x.clone(), w], 7, move |g, v| g.depthwise_conv2d(v[0], v[1], mult, stride, pad)),
        );
    }

    let gamma = uniform(shape(1, 3, 1, 1), 0.5, 1.5, &mut r);
    let beta = uniform(shape(1, 3, 1, 1), -0.5, 0.5, &mut r);
    push(
        "batchnorm batch statistics",
        check_op(&[x.clone(), gamma.clone(), beta.clone()], 8, |g, v| {
            g.batchnorm(v[0], v[1], v[2], BatchNormMode::Train)
        }),
    );
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    push(
        "batchnorm running statistics",
        check_op(&[x.clone(), gamma, beta], 9, move |g, v| {
            g.batchnorm(v[0], v[1], v[2], BatchNormMode::Infer { mean: &mean, var: &var })
        }),
    );

    let xp = away_from(shape(2, 3, 4, 4), 0.05, 1.0, &mut r);
    let slope = uniform(shape(1, 3, 1, 1), 0.1, 0.4, &mut r);
    push("prelu", check_op(&[xp, slope], 10, |g, v| g.prelu(v[0], v[1])));
    push("maxpool 2x2", check_op(std::slice::from_ref(&x), 11, |g, v| g.maxpool2x2(v[0])));
    push("maxpool 3x3 s2 p1", check_op(std::slice::from_ref(&x), 12, |g, v| g.maxpool(v[0], 3, 2, 1)));
    let x8 = uniform(shape(2, 3, 6, 6), -1.0, 1.0, &mut r);
    push("avgpool2", check_op(std::slice::from_ref(&x8), 13, |g, v| g.avgpool2(v[0])));
    push("global_avg_pool", check_op(std::slice::from_ref(&x8), 14, |g, v| g.global_avg_pool(v[0])));
    let dw = uniform(shape(5, 3, 6, 6), -0.3, 0.3, &mut r);
    let db = uniform(shape(1, 5, 1, 1), -0.3, 0.3, &mut r);
    push("dense", check_op(&[x8, dw, db], 15, |g, v| g.dense(v[0], v[1], v[2])));
    let logits = uniform(shape(4, 6, 1, 1), -2.0, 2.0, &mut r);
    push(
        "softmax_cross_entropy",
        check_op(&[logits], 16, |g, v| g.softmax_cross_entropy(v[0], &[0, 5, 2, 2])),
    );

    let xs = away_from(shape(2, 2, 3, 3), 0.0, 2.0, &mut r).map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 0.9 } else { v });
    push("sign_ste relaxed", check_op(&[xs], 17, |g, v| g.sign_ste(v[0], true)));
    let xm = uniform(shape(2, 2, 3, 3), -0.8, 0.9, &mut r);
    push(
        "margin_ste relaxed",
        check_op(&[xm], 18, |g, v| {
            let m = g.value(v[0]).data().iter().map(|x| x - 0.1).collect();
            g.margin_ste(v[0], m, true)
        }),
    );
    let z = uniform(shape(2, 4, 3, 3), -2.0, 2.0, &mut r);
    push(
        "pair_select relaxed",
        check_op(&[z, RealTensor::scalar(1.3)], 19, |g, v| g.pair_select(v[0], v[1], true)),
    );
    out
}

/// `lab_backward` against central differences of `Σ R ⊙ lab_relaxed`, over
/// the input, the depthwise kernels, the biases and β.
pub fn lab_surrogate_check(seed: u64, padding: Padding) -> GradError {
    let mut r = rng(seed);
    let c = 3;
    let x = uniform(shape(2, c, 5, 4), -1.0, 1.0, &mut r);
    let mut p = LabParams::init(c, 3, &mut r).unwrap();
    p.dw_bias = (0..2 * c).map(|_| r.random_range(-0.3..0.3)).collect();
    p.beta = 1.7;
    let out_shape = lab_relaxed(&x, &p, padding).unwrap().shape();
    let weight = uniform(out_shape, -1.0, 1.0, &mut r);
    let loss = |x: &RealTensor, p: &LabParams| -> Real {
        let y = lab_relaxed(x, p, padding).unwrap();
        y.data().iter().zip(weight.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = lab_forward(&x, &p, padding).unwrap();
    let grads = lab_backward(&cache, &p, weight.data()).unwrap();
    let mut err = GradError::default();
    for j in 0..x.len() {
        let num = central(|d| {
            let mut xx = x.clone();
            xx.data_mut()[j] += d;
            loss(&xx, &p)
        });
        err.record(grads.dx[j], num);
    }
    for j in 0..p.dw_weights.len() {
        let num = central(|d| {
            let mut pp = p.clone();
            pp.dw_weights.data_mut()[j] += d;
            loss(&x, &pp)
        });
        err.record(grads.d_weights[j], num);
    }
    for j in 0..p.dw_bias.len() {
        let num = central(|d| {
            let mut pp = p.clone();
            pp.dw_bias[j] += d;
            loss(&x, &pp)
        });
        err.record(grads.d_bias[j], num);
    }
    let num = central(|d| {
        let mut pp = p.clone();
        pp.beta += d;
        loss(&x, &pp)
    });
    err.record(grads.d_beta, num);
    err
}

/// One stage of two binary layers on 4 channels over 8×8 inputs.
pub fn tiny_spec(choice: BinarizerChoice, in_c: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        blocks: vec![BlockSpec {
            stage: 1,
            layers: 2,
            channels: 4,
            stride: 1,
            binarizer: choice,
            use_prelu: true,
        }],
        ..ModelSpec::staged(shape(1, in_c, 8, 8), classes, 4, 2)
    }
}

/// Tape gradients of the relaxed network's loss against central
/// differences for every trainable parameter element.
pub fn end_to_end_check(spec: ModelSpec, seed: u64) -> GradError {
    let model = Model::new(spec.clone(), seed).unwrap();
    let mut r = rng(seed ^ 0xe2e);
    let x = uniform(spec.input.with_n(4), -1.0, 1.0, &mut r);
    let labels: Vec<usize> = (0..4).map(|i| i % spec.classes).collect();
    let (_, grads, _) = loss_and_grads(&model, &x, &labels, Mode::Relaxed).unwrap();
    let loss = |m: &Model| softmax_cross_entropy(&m.forward(&x, Mode::Relaxed).unwrap(), &labels).unwrap().0;
    let mut err = GradError::default();
    let mut probe = model.clone();
    for (pi, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (j, &gj) in g.iter().enumerate() {
            let orig = probe.params()[pi].value.data()[j];
            let num = central(|d| {
                probe.params_mut()[pi].value.data_mut()[j] = orig + d;
                loss(&probe)
            });
            probe.params_mut()[pi].value.data_mut()[j] = orig;
            err.record(gj, num);
        }
    }
    err
}

/// Direct-loop ±1 convolution in integers. `same` is the pad value for
/// same-size outputs (extra padding at the bottom/right), `None` for valid.
pub fn naive_pm1_conv(x: &BitTensor, w: &BitTensor, stride: usize, same: Option<i32>) -> (Shape4, Vec<i32>) {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let val = |b: bool| if b { 1 } else { -1 };
    let (oh, ow, top, left) = match same {
        None => ((xs.h - k) / stride + 1, (xs.w - k) / stride + 1, 0, 0),
        Some(_) => {
            let oh = xs.h.div_ceil(stride);
            let ow = xs.w.div_ceil(stride);
            let ph = ((oh - 1) * stride + k).saturating_sub(xs.h);
            let pw = ((ow - 1) * stride + k).saturating_sub(xs.w);
            (oh, ow, (ph / 2) as isize, (pw / 2) as isize)
        }
    };
    let mut data = Vec::with_capacity(xs.n * ws.n * oh * ow);
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0;
                    for c in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - top;
                                let ix = (ox * stride + kx) as isize - left;
                                let inside = iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w;
                                let a = if inside {
                                    val(x.get(n, c, iy as usize, ix as usize))
                                } else {
                                    same.unwrap_or(0)
                                };
                                acc += a * val(w.get(o, c, ky, kx));
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    (shape(xs.n, ws.n, oh, ow), data)
}
