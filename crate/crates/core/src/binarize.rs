//! Activation binarizers: sign with a clipped straight-through estimator,
//! the learnable activation binarizer (LAB), and the Niblack and Sauvola
//! local-thresholding baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::conv::{depthwise_conv2d, depthwise_conv2d_backward};
use crate::tensor::{pack, BitTensor, Padding, Real, RealTensor, Shape4};

/// Two-class soft-argmax lifted to ±1 together with its partials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surrogate {
    /// `ŷ = 2p − 1` with `p = σ(β(z1 − z0))`.
    pub value: Real,
    /// `∂ŷ/∂z1 = 2βp(1−p)`; `∂ŷ/∂z0` is its negation.
    pub d_z1: Real,
    /// `∂ŷ/∂β = 2p(1−p)(z1 − z0)`.
    pub d_beta: Real,
}

pub fn surrogate(z0: Real, z1: Real, beta: Real) -> Surrogate {
    let diff = z1 - z0;
    // 2σ(t) − 1 = tanh(t/2) and 4p(1−p) = 1 − ŷ²; both stay accurate in the tails.
    let value = (0.5 * beta * diff).tanh();
    let two_pq = 0.5 * (1.0 - value * value);
    Surrogate {
        value,
        d_z1: beta * two_pq,
        d_beta: two_pq * diff,
    }
}

/// Per-layer LAB state. `dw_weights: (2C, 1, k, k)`; output channels `2c` and
/// `2c + 1` both read input channel `c` and form the `(z0, z1)` logit pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LabParams {
    pub dw_weights: RealTensor,
    pub dw_bias: Vec<Real>,
    pub beta: Real,
}

impl LabParams {
    pub const DEFAULT_KERNEL: usize = 3;
    pub const INITIAL_BETA: Real = 1.0;

    /// Glorot-uniform kernels, zero biases, β = 1.
    pub fn init<R: Rng + ?Sized>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        let shape = Shape4::new(2 * channels, 1, k, k)?;
        let fan = (k * k) as Real;
        let limit = (6.0 / (fan + 2.0 * fan)).sqrt();
        Ok(LabParams {
            dw_weights: RealTensor::uniform(shape, -limit, limit, rng),
            dw_bias: vec![0.0; 2 * channels],
            beta: Self::INITIAL_BETA,
        })
    }

    /// `z0 = 0`, `z1 = x`: LAB collapses to the global sign threshold.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("identity LAB needs an odd kernel, got {k}")));
        }
        let shape = Shape4::new(2 * channels, 1, k, k)?;
        let center = (k / 2) * k + k / 2;
        let mut w = RealTensor::zeros(shape);
        for c in 0..channels {
            w.data_mut()[(2 * c + 1) * k * k + center] = 1.0;
        }
        Ok(LabParams {
            dw_weights: w,
            dw_bias: vec![0.0; 2 * channels],
            beta: Self::INITIAL_BETA,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw_weights.shape().n / 2
    }

    pub fn kernel(&self) -> usize {
        self.dw_weights.shape().h
    }

    /// Trainable scalars: `2·C·k²` weights, `2C` biases and β.
    pub fn param_count(&self) -> usize {
        self.dw_weights.len() + self.dw_bias.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.dw_weights.shape();
        if !s.n.is_multiple_of(2) || s.c != 1 || s.h != s.w {
            return Err(shape_mismatch("lab", format!("weights {s} must be (2C, 1, k, k)")));
        }
        if self.dw_bias.len() != s.n {
            return Err(shape_mismatch("lab", format!("{} biases for {} kernels", self.dw_bias.len(), s.n)));
        }
        if !self.beta.is_finite() || self.dw_bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("LAB parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BinarizerKind {
    SignSte,
    Lab(LabParams),
    Niblack { k: Real, window: usize },
    /// `r = None` uses half the dynamic range of the map being binarized.
    Sauvola { k: Real, window: usize, r: Option<Real> },
}

impl BinarizerKind {
    pub const NIBLACK_K: Real = -0.2;
    pub const SAUVOLA_K: Real = 0.2;
    pub const WINDOW: usize = 3;

    pub fn validate(&self) -> Result<()> {
        match self {
            BinarizerKind::SignSte => Ok(()),
            BinarizerKind::Lab(p) => p.validate(),
            BinarizerKind::Niblack { window, .. } => check_window(*window),
            BinarizerKind::Sauvola { window, r, .. } => {
                check_window(*window)?;
                match r {
                    Some(r) if !(*r > 0.0) => Err(Error::InvalidArgument(format!("Sauvola R must be positive, got {r}"))),
                    _ => Ok(()),
                }
            }
        }
    }

    /// Short tag used in reports.
    pub fn tag(&self) -> &'static str {
        match self {
            BinarizerKind::SignSte => "sign",
            BinarizerKind::Lab(_) => "lab",
            BinarizerKind::Niblack { .. } => "niblack",
            BinarizerKind::Sauvola { .. } => "sauvola",
        }
    }
}

/// Binarizer family without parameters, as selected in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizerChoice {
    Sign,
    Lab,
    Niblack,
    Sauvola,
}

impl std::str::FromStr for BinarizerChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sign" | "ste" | "sign_ste" => BinarizerChoice::Sign,
            "lab" => BinarizerChoice::Lab,
            "niblack" => BinarizerChoice::Niblack,
            "sauvola" => BinarizerChoice::Sauvola,
            other => return Err(Error::InvalidArgument(format!("unknown binarizer `{other}`"))),
        })
    }
}

impl std::fmt::Display for BinarizerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BinarizerChoice::Sign => "sign",
            BinarizerChoice::Lab => "lab",
            BinarizerChoice::Niblack => "niblack",
            BinarizerChoice::Sauvola => "sauvola",
        })
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window must be odd and at least 3, got {window}")));
    }
    Ok(())
}

pub fn sign_ste_forward(x: &RealTensor) -> BitTensor {
    pack(x)
}

/// Upstream gradient passed where `|x| ≤ 1`, zero elsewhere.
pub fn sign_ste_backward(x: &RealTensor, upstream: &[Real]) -> Result<Vec<Real>> {
    if upstream.len() != x.len() {
        return Err(shape_mismatch("sign_ste_backward", "upstream length"));
    }
    Ok(x.data()
        .iter()
        .zip(upstream)
        .map(|(&v, &g)| if v.abs() <= 1.0 { g } else { 0.0 })
        .collect())
}

/// Forward state kept for [`lab_backward`].
#[derive(Clone, Debug)]
pub struct LabCache {
    pub input: RealTensor,
    pub logits: RealTensor,
    pub padding: Padding,
}

#[derive(Clone, Debug)]
pub struct LabGrads {
    pub dx: Vec<Real>,
    pub d_weights: Vec<Real>,
    pub d_bias: Vec<Real>,
    pub d_beta: Real,
}

/// Depthwise logits `(N, 2C, H, W)` with biases applied.
pub fn lab_logits(x: &RealTensor, p: &LabParams, padding: Padding) -> Result<RealTensor> {
    p.validate()?;
    if x.shape().c != p.channels() {
        return Err(shape_mismatch(
            "lab",
            format!("input has {} channels, LAB serves {}", x.shape().c, p.channels()),
        ));
    }
    let mut z = depthwise_conv2d(x, &p.dw_weights, 2, 1, padding)?;
    let s = z.shape();
    let plane = s.plane();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += p.dw_bias[(i / plane) % s.c];
    }
    Ok(z)
}

/// Pairwise argmax of `(z0, z1) = (logits[2c], logits[2c+1])`; ties give −1.
pub fn select_pairs(logits: &RealTensor) -> BitTensor {
    let s = logits.shape();
    let out = s.with_c(s.c / 2);
    BitTensor::from_fn(out, |n, c, y, x| logits.at(n, 2 * c + 1, y, x) > logits.at(n, 2 * c, y, x))
}

pub fn lab_forward(x: &RealTensor, p: &LabParams, padding: Padding) -> Result<(BitTensor, LabCache)> {
    let logits = lab_logits(x, p, padding)?;
    let bits = select_pairs(&logits);
    Ok((
        bits,
        LabCache {
            input: x.clone(),
            logits,
            padding,
        },
    ))
}

/// Surrogate-gradient backward: the forward output is treated as
/// `ŷ = 2σ(β(z1 − z0)) − 1`.
pub fn lab_backward(cache: &LabCache, p: &LabParams, upstream: &[Real]) -> Result<LabGrads> {
    let s = cache.logits.shape();
    let half = s.c / 2;
    let plane = s.plane();
    if upstream.len() != s.n * half * plane {
        return Err(shape_mismatch("lab_backward", "upstream length"));
    }
    let mut dz = vec![0.0; s.len()];
    let mut d_bias = vec![0.0; s.c];
    let mut d_beta = 0.0;
    for n in 0..s.n {
        for c in 0..half {
            let z0 = cache.logits.channel(n, 2 * c);
            let z1 = cache.logits.channel(n, 2 * c + 1);
            let o0 = (n * s.c + 2 * c) * plane;
            let o1 = o0 + plane;
            let og = (n * half + c) * plane;
            for j in 0..plane {
                let sg = surrogate(z0[j], z1[j], p.beta);
                let g = upstream[og + j];
                dz[o1 + j] = g * sg.d_z1;
                dz[o0 + j] = -g * sg.d_z1;
                d_bias[2 * c + 1] += g * sg.d_z1;
                d_bias[2 * c] -= g * sg.d_z1;
                d_beta += g * sg.d_beta;
            }
        }
    }
    let (dx, d_weights) = depthwise_conv2d_backward(&cache.input, &p.dw_weights, &dz, 2, 1, cache.padding)?;
    Ok(LabGrads {
        dx,
        d_weights,
        d_bias,
        d_beta,
    })
}

/// Surrogate output `ŷ` for every pixel (used for finite-difference checks).
pub fn lab_relaxed(x: &RealTensor, p: &LabParams, padding: Padding) -> Result<RealTensor> {
    let z = lab_logits(x, p, padding)?;
    let s = z.shape();
    Ok(RealTensor::from_fn(s.with_c(s.c / 2), |n, c, y, xx| {
        surrogate(z.at(n, 2 * c, y, xx), z.at(n, 2 * c + 1, y, xx), p.beta).value
    }))
}

/// Window statistics of `x − x[center]` over the border-clipped window:
/// `(mean offset, population std)`. Centering on the pixel makes a flat
/// window give exactly zero for both.
fn window_stats(plane: &[Real], h: usize, w: usize, y: usize, x: usize, r: usize) -> (Real, Real) {
    let center = plane[y * w + x];
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as Real;
    let mut sum = 0.0;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            sum += plane[yy * w + xx] - center;
        }
    }
    let mean = sum / count;
    let mut sq = 0.0;
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let d = plane[yy * w + xx] - center - mean;
            sq += d * d;
        }
    }
    (mean, (sq / count).sqrt())
}

fn for_each_pixel(x: &RealTensor, window: usize, mut f: impl FnMut(Real, Real, Real) -> Real) -> Vec<Real> {
    let s = x.shape();
    let r = window / 2;
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.channel(n, c);
            for y in 0..s.h {
                for xx in 0..s.w {
                    let (mean_off, std) = window_stats(plane, s.h, s.w, y, xx, r);
                    out.push(f(plane[y * s.w + xx], mean_off, std));
                }
            }
        }
    }
    out
}

/// Half the dynamic range of `x` (1 for a constant map).
pub fn default_sauvola_r(x: &RealTensor) -> Real {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((Real::INFINITY, Real::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let r = 0.5 * (hi - lo);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Per-pixel `x − T` with `T = μ + k·σ`. The pixel binarizes to +1 iff the
/// margin is positive.
pub fn niblack_margins(x: &RealTensor, k: Real, window: usize) -> Result<Vec<Real>> {
    check_window(window)?;
    Ok(for_each_pixel(x, window, |_, mean_off, std| -mean_off - k * std))
}

/// Per-pixel `x − T` with `T = μ·(1 + k·(σ/R − 1))`.
pub fn sauvola_margins(x: &RealTensor, k: Real, window: usize, r: Option<Real>) -> Result<Vec<Real>> {
    check_window(window)?;
    let r = match r {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(Error::InvalidArgument(format!("Sauvola R must be positive, got {r}"))),
        None => default_sauvola_r(x),
    };
    Ok(for_each_pixel(x, window, |v, mean_off, std| {
        let mean = v + mean_off;
        v - mean * (1.0 + k * (std / r - 1.0))
    }))
}

fn bits_from_margins(shape: Shape4, margins: &[Real]) -> BitTensor {
    let (h, w, c) = (shape.h, shape.w, shape.c);
    BitTensor::from_fn(shape, |n, ci, y, x| margins[((n * c + ci) * h + y) * w + x] > 0.0)
}

pub fn niblack(x: &RealTensor, k: Real, window: usize) -> Result<BitTensor> {
    Ok(bits_from_margins(x.shape(), &niblack_margins(x, k, window)?))
}

pub fn sauvola(x: &RealTensor, k: Real, window: usize, r: Option<Real>) -> Result<BitTensor> {
    Ok(bits_from_margins(x.shape(), &sauvola_margins(x, k, window, r)?))
}

/// Hard binarization with any binarizer. LAB uses `lab_padding` for its
/// depthwise convolution.
pub fn binarize(x: &RealTensor, kind: &BinarizerKind, lab_padding: Padding) -> Result<BitTensor> {
    kind.validate()?;
    match kind {
        BinarizerKind::SignSte => Ok(sign_ste_forward(x)),
        BinarizerKind::Lab(p) => Ok(select_pairs(&lab_logits(x, p, lab_padding)?)),
        BinarizerKind::Niblack { k, window } => niblack(x, *k, *window),
        BinarizerKind::Sauvola { k, window, r } => sauvola(x, *k, *window, *r),
    }
}

/// Per-output-channel symmetric quantization of the depthwise kernels to
/// `bits ∈ {4, 8}`, returned dequantized. Biases and β are untouched.
pub fn quantize_lab_weights(p: &LabParams, bits: u32) -> Result<LabParams> {
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidArgument(format!("LAB quantization supports 4 or 8 bits, got {bits}")));
    }
    let levels = ((1i64 << (bits - 1)) - 1) as Real;
    let per = p.kernel() * p.kernel();
    let mut out = p.clone();
    for kern in out.dw_weights.data_mut().chunks_mut(per) {
        let max = kern.iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
        if max == 0.0 {
            continue;
        }
        let scale = max / levels;
        for v in kern.iter_mut() {
            let q = (*v / scale).round().clamp(-levels, levels);
            *v = max * (q / levels);
        }
    }
    Ok(out)
}

/// Quantization step of each depthwise kernel (`max|w| / (2^{bits−1} − 1)`).
pub fn quantization_scales(p: &LabParams, bits: u32) -> Vec<Real> {
    let levels = ((1i64 << (bits - 1)) - 1) as Real;
    let per = p.kernel() * p.kernel();
    p.dw_weights
        .data()
        .chunks(per)
        .map(|k| k.iter().fold(0.0 as Real, |m, v| m.max(v.abs())) / levels)
        .collect()
}
