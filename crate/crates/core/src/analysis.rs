//! Feature-map diagnostics: uniqueness ratio, channel-pair dissimilarity,
//! post-binarization distribution and operation counts.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::binarize::{binarize, BinarizerKind, LabParams};
use crate::bitconv::{binconv, bops_for, BinConvLayer};
use crate::error::{shape_mismatch, Error, Result};
use crate::nets::{LayerDesc, LayerKind, LayerTrace};
use crate::tensor::{BitTensor, Padding, Real, RealTensor, Shape4};

/// Largest kernel whose 2^(k²) sign patterns are enumerated.
pub const MAX_UNIQUENESS_KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub k: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub padding: String,
    /// Number of enumerated kernels, 2^(k²·c_in).
    pub n_t: u64,
    /// Distinct binary outputs among them.
    pub n_c: u64,
    pub eta: Real,
    /// ln of (k²·C)^(H·W).
    pub ln_theoretical_max_n: Real,
    /// ln of (k²·C + 1)^(H·W), the count of distinct per-element sums.
    pub ln_alternative_max_n: Real,
}

fn padding_tag(p: Padding) -> String {
    match p {
        Padding::Valid => "valid".into(),
        Padding::Same(v) => format!("same({v})"),
    }
}

/// Kernel number `i` of the enumeration: bit `t` of `i` is tap `t`
/// (row-major) of a `(1, 1, k, k)` ±1 kernel.
pub fn enumerated_kernel(k: usize, i: u64) -> BitTensor {
    BitTensor::from_fn(Shape4 { n: 1, c: 1, h: k, w: k }, |_, _, y, x| (i >> (y * k + x)) & 1 == 1)
}

/// Convolves the single-channel binary map `a` with every ±1 `k × k`
/// kernel, binarizes each result and counts the distinct binary maps.
pub fn uniqueness_eta(a: &BitTensor, k: usize, binarizer: &BinarizerKind, padding: Padding) -> Result<UniquenessReport> {
    let s = a.shape();
    if s.n != 1 || s.c != 1 {
        return Err(shape_mismatch("uniqueness_eta", format!("expected one single-channel map, got {s}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("kernel size must be positive".into()));
    }
    if k > MAX_UNIQUENESS_KERNEL {
        return Err(Error::KernelTooLarge(k));
    }
    binarizer.validate()?;
    let n_t = 1u64 << (k * k);
    let mut seen: HashSet<BitTensor> = HashSet::new();
    for i in 0..n_t {
        let layer = BinConvLayer::new(enumerated_kernel(k, i), 1, padding)?;
        let d = binconv(a, &layer)?;
        seen.insert(binarize(&d, binarizer, Padding::SAME_ZERO)?);
    }
    let n_c = seen.len() as u64;
    let hw = (s.h * s.w) as Real;
    let base = (k * k * s.c) as Real;
    Ok(UniquenessReport {
        k,
        c_in: s.c,
        h: s.h,
        w: s.w,
        padding: padding_tag(padding),
        n_t,
        n_c,
        eta: n_c as Real / n_t as Real,
        ln_theoretical_max_n: hw * base.ln(),
        ln_alternative_max_n: hw * (base + 1.0).ln(),
    })
}

/// The binarizer restricted to channel `c` (only LAB has per-channel state).
pub fn channel_binarizer(kind: &BinarizerKind, c: usize) -> Result<BinarizerKind> {
    Ok(match kind {
        BinarizerKind::Lab(p) => {
            if c >= p.channels() {
                return Err(shape_mismatch("channel_binarizer", format!("channel {c} of {}", p.channels())));
            }
            let k = p.kernel();
            let kk = k * k;
            let w = RealTensor::from_vec(
                Shape4 { n: 2, c: 1, h: k, w: k },
                p.dw_weights.data()[2 * c * kk..(2 * c + 2) * kk].to_vec(),
            )?;
            BinarizerKind::Lab(LabParams {
                dw_weights: w,
                dw_bias: p.dw_bias[2 * c..2 * c + 2].to_vec(),
                beta: p.beta,
            })
        }
        other => other.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerUniqueness {
    pub layer: String,
    pub binarizer: String,
    pub k: usize,
    pub maps: usize,
    pub mean_eta: Real,
    pub min_eta: Real,
    pub max_eta: Real,
    pub ln_theoretical_max_n: Real,
}

/// Mean η over the channels of every image of each traced layer. Each
/// binary input map is re-binarized with its own layer's binarizer;
/// `max_channels` caps the channels visited per image.
pub fn layer_uniqueness(
    traces: &[LayerTrace],
    binarizers: &[(String, BinarizerKind)],
    k: usize,
    padding: Padding,
    max_channels: Option<usize>,
) -> Result<Vec<LayerUniqueness>> {
    let mut out = Vec::new();
    for t in traces {
        let kind = binarizers
            .iter()
            .find(|(n, _)| *n == t.layer)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::InvalidArgument(format!("no binarizer for layer `{}`", t.layer)))?;
        let s = t.post.shape();
        let channels = max_channels.map_or(s.c, |m| m.min(s.c));
        let mut etas = Vec::new();
        let mut ln_n = 0.0;
        for c in 0..channels {
            let b = channel_binarizer(kind, c)?;
            for n in 0..s.n {
                let r = uniqueness_eta(&t.post.channel_tensor(n, c), k, &b, padding)?;
                ln_n = r.ln_theoretical_max_n;
                etas.push(r.eta);
            }
        }
        if etas.is_empty() {
            continue;
        }
        out.push(LayerUniqueness {
            layer: t.layer.clone(),
            binarizer: kind.tag().to_string(),
            k,
            maps: etas.len(),
            mean_eta: etas.iter().sum::<Real>() / etas.len() as Real,
            min_eta: etas.iter().copied().fold(Real::INFINITY, Real::min),
            max_eta: etas.iter().copied().fold(Real::NEG_INFINITY, Real::max),
            ln_theoretical_max_n: ln_n,
        });
    }
    Ok(out)
}

fn check_pair(op: &'static str, a: &[Real], b: &[Real]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_mismatch(op, format!("maps of {} and {} elements", a.len(), b.len())));
    }
    Ok(())
}

/// Dynamic range used by `ssim` (±1 maps).
pub const SSIM_RANGE: Real = 2.0;

/// Single-window SSIM of two equally sized maps.
pub fn ssim(a: &[Real], b: &[Real]) -> Result<Real> {
    check_pair("ssim", a, b)?;
    let n = a.len() as Real;
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let ma = a.iter().sum::<Real>() / n;
    let mb = b.iter().sum::<Real>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// Euclidean norm dissimilarity: the norm of the mean absolute difference
/// and the mean absolute sum of two maps.
pub fn endsim(a: &[Real], b: &[Real]) -> Result<Real> {
    check_pair("endsim", a, b)?;
    let n = a.len() as Real;
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<Real>() / n;
    let sum = a.iter().zip(b).map(|(x, y)| (x + y).abs()).sum::<Real>() / n;
    Ok((diff * diff + sum * sum).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairStats {
    pub ssim: Real,
    pub endsim: Real,
    /// Unordered channel pairs per image.
    pub pairs: usize,
    pub images: usize,
}

/// Averages `ssim` and `endsim` over all unordered channel pairs of each
/// image of `t`, then over images.
pub fn channel_pair_stats(t: &RealTensor) -> Result<PairStats> {
    let s = t.shape();
    if s.c < 2 {
        return Err(shape_mismatch("pairwise_dissimilarity", format!("{s} has fewer than 2 channels")));
    }
    let pairs = s.c * (s.c - 1) / 2;
    let (mut ss, mut es) = (0.0, 0.0);
    for n in 0..s.n {
        let (mut si, mut ei) = (0.0, 0.0);
        for i in 0..s.c {
            for j in i + 1..s.c {
                si += ssim(t.channel(n, i), t.channel(n, j))?;
                ei += endsim(t.channel(n, i), t.channel(n, j))?;
            }
        }
        ss += si / pairs as Real;
        es += ei / pairs as Real;
    }
    Ok(PairStats {
        ssim: ss / s.n as Real,
        endsim: es / s.n as Real,
        pairs,
        images: s.n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDissimilarity {
    pub layer: String,
    pub binarizer: String,
    /// Statistics of the real-valued binarizer input.
    pub pre: PairStats,
    /// Statistics of the ±1 binarizer output.
    pub post: PairStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DissimilarityReport {
    pub layers: Vec<LayerDissimilarity>,
}

impl DissimilarityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,binarizer,ssim_pre,endsim_pre,ssim_post,endsim_post,pairs,images")?;
        for l in &self.layers {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                l.layer,
                l.binarizer,
                l.pre.ssim as f32,
                l.pre.endsim as f32,
                l.post.ssim as f32,
                l.post.endsim as f32,
                l.post.pairs,
                l.post.images
            )?;
        }
        Ok(())
    }
}

/// Pre- and post-binarization pair statistics of every traced layer.
pub fn pairwise_dissimilarity(traces: &[LayerTrace]) -> Result<DissimilarityReport> {
    let layers = traces
        .iter()
        .map(|t| {
            Ok(LayerDissimilarity {
                layer: t.layer.clone(),
                binarizer: t.binarizer.to_string(),
                pre: channel_pair_stats(&t.pre)?,
                post: channel_pair_stats(&crate::tensor::unpack(&t.post))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DissimilarityReport { layers })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Distribution {
    /// Fraction of +1 in each channel over all images and positions.
    pub per_channel: Vec<Real>,
    pub mean: Real,
}

pub fn binary_distribution(b: &BitTensor) -> Distribution {
    let s = b.shape();
    let per = (s.n * s.plane()).max(1) as Real;
    let per_channel: Vec<Real> = (0..s.c)
        .map(|c| (0..s.n).map(|n| b.count_ones_channel(n, c)).sum::<u64>() as Real / per)
        .collect();
    let mean = if per_channel.is_empty() {
        0.0
    } else {
        per_channel.iter().sum::<Real>() / per_channel.len() as Real
    };
    Distribution { per_channel, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDistribution {
    pub layer: String,
    pub binarizer: String,
    pub distribution: Distribution,
}

/// Accumulates per-channel +1 counts of traced layers over many batches.
#[derive(Clone, Debug, Default)]
pub struct DistributionAccumulator {
    layers: Vec<(String, String, Vec<u64>, u64)>,
}

impl DistributionAccumulator {
    pub fn add(&mut self, traces: &[LayerTrace]) {
        for t in traces {
            let s = t.post.shape();
            let pos = match self.layers.iter().position(|l| l.0 == t.layer) {
                Some(p) => p,
                None => {
                    self.layers.push((t.layer.clone(), t.binarizer.to_string(), vec![0; s.c], 0));
                    self.layers.len() - 1
                }
            };
            let entry = &mut self.layers[pos];
            for c in 0..s.c {
                entry.2[c] += (0..s.n).map(|n| t.post.count_ones_channel(n, c)).sum::<u64>();
            }
            entry.3 += (s.n * s.plane()) as u64;
        }
    }

    pub fn finish(&self) -> Vec<LayerDistribution> {
        self.layers
            .iter()
            .map(|(layer, bin, ones, total)| {
                let per_channel: Vec<Real> = ones.iter().map(|&o| o as Real / (*total).max(1) as Real).collect();
                let mean = per_channel.iter().sum::<Real>() / per_channel.len().max(1) as Real;
                LayerDistribution {
                    layer: layer.clone(),
                    binarizer: bin.clone(),
                    distribution: Distribution { per_channel, mean },
                }
            })
            .collect()
    }
}

pub fn write_distribution_csv<W: Write>(layers: &[LayerDistribution], mut w: W) -> Result<()> {
    writeln!(w, "layer,binarizer,channel,fraction_plus_one")?;
    for l in layers {
        writeln!(w, "{},{},mean,{}", l.layer, l.binarizer, l.distribution.mean as f32)?;
        for (c, f) in l.distribution.per_channel.iter().enumerate() {
            writeln!(w, "{},{},{},{}", l.layer, l.binarizer, c, *f as f32)?;
        }
    }
    Ok(())
}

pub fn write_uniqueness_csv<W: Write>(layers: &[LayerUniqueness], mut w: W) -> Result<()> {
    writeln!(w, "layer,binarizer,k,maps,mean_eta,min_eta,max_eta,ln_theoretical_max_n")?;
    for l in layers {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            l.layer,
            l.binarizer,
            l.k,
            l.maps,
            l.mean_eta as f32,
            l.min_eta as f32,
            l.max_eta as f32,
            l.ln_theoretical_max_n as f32
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerOps {
    pub layer: String,
    pub category: &'static str,
    pub bops: u64,
    pub flops: u64,
}

impl LayerOps {
    pub fn ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.flops as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct OpsBudget {
    pub layers: Vec<LayerOps>,
}

impl OpsBudget {
    pub fn bops(&self) -> u64 {
        self.layers.iter().map(|l| l.bops).sum()
    }

    pub fn flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    /// BOP/64 + FLOP.
    pub fn ops(&self) -> f64 {
        self.bops() as f64 / 64.0 + self.flops() as f64
    }

    pub fn flops_in(&self, category: &str) -> u64 {
        self.layers.iter().filter(|l| l.category == category).map(|l| l.flops).sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,category,bops,flops,ops")?;
        for l in &self.layers {
            writeln!(w, "{},{},{},{},{}", l.layer, l.category, l.bops, l.flops, l.ops())?;
        }
        writeln!(w, "total,all,{},{},{}", self.bops(), self.flops(), self.ops())?;
        Ok(())
    }
}

/// Multiply-accumulates count as one FLOP; each LAB site adds its two
/// depthwise kernels per channel, one bias add per logit and one
/// comparison per output bit.
pub fn count_ops(layers: &[LayerDesc]) -> OpsBudget {
    let mut out = Vec::new();
    for l in layers {
        let row = |category, bops, flops| LayerOps {
            layer: l.name.clone(),
            category,
            bops,
            flops,
        };
        let (i, o) = (l.input.len() as u64, l.output.len() as u64);
        match l.kind {
            LayerKind::Conv { k, depthwise, .. } => {
                let kk = (k * k) as u64;
                if depthwise {
                    out.push(row("depthwise", 0, o * kk));
                } else {
                    out.push(row("conv", 0, o * kk * l.input.c as u64));
                }
            }
            LayerKind::BinaryConv { k, .. } => out.push(row("binary_conv", bops_for(l.output, l.input.c, k), 0)),
            LayerKind::Lab { k } => {
                out.push(row("lab_depthwise", 0, 2 * i * (k * k) as u64));
                out.push(row("lab_bias", 0, 2 * i));
                out.push(row("lab_argmax", 0, i));
            }
            LayerKind::Prelu => out.push(row("prelu", 0, i)),
            LayerKind::Dense => out.push(row("dense", 0, (l.input.c * l.output.c) as u64)),
        }
    }
    OpsBudget { layers: out }
}

/// ASCII PGM (P2) of one channel: −1 ↦ 0, +1 ↦ 255.
pub fn write_pgm<W: Write>(b: &BitTensor, n: usize, c: usize, mut w: W) -> Result<()> {
    let s = b.shape();
    writeln!(w, "P2\n{} {}\n255", s.w, s.h)?;
    for y in 0..s.h {
        let row: Vec<&str> = (0..s.w).map(|x| if b.get(n, c, y, x) { "255" } else { "0" }).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn save_pgm(path: &Path, b: &BitTensor, n: usize, c: usize) -> Result<()> {
    write_pgm(b, n, c, std::io::BufWriter::new(std::fs::File::create(path)?))
}
