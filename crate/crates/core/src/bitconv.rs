//! Binary convolution on bit-packed ±1 tensors via XNOR and popcount.
//!
//! For ±1 vectors `a`, `w` of length `L`, `Σ aᵢ·wᵢ = L − 2·popcount(a ⊕ w)`.
//! Each receptive field is gathered into a contiguous bit string (the packed
//! analog of im2col) so the inner loop is a run of word XORs and popcounts.

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::{pack, BitTensor, ConvGeometry, Padding, Real, RealTensor, Shape4};

#[derive(Clone, Debug, PartialEq)]
pub struct BinConvLayer {
    weights: BitTensor,
    alpha: Option<Vec<Real>>,
    stride: usize,
    padding: Padding,
}

impl BinConvLayer {
    /// `weights: (C_out, C_in, k, k)`. `padding` may pad with −1, 0 or +1.
    pub fn new(weights: BitTensor, stride: usize, padding: Padding) -> Result<Self> {
        let s = weights.shape();
        if s.h != s.w || s.w > 64 {
            return Err(shape_mismatch("binconv", format!("kernel {s} must be square, at most 64 wide")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if let Padding::Same(v) = padding {
            if v != -1.0 && v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!("binary pad value must be −1, 0 or +1, got {v}")));
            }
        }
        Ok(BinConvLayer {
            weights,
            alpha: None,
            stride,
            padding,
        })
    }

    /// Binarizes latent real weights with `sign` (0 ↦ −1). With `scaling`,
    /// α[c] is the mean absolute latent weight of output channel `c`.
    pub fn from_latent(latent: &RealTensor, stride: usize, padding: Padding, scaling: bool) -> Result<Self> {
        let mut layer = Self::new(pack(latent), stride, padding)?;
        if scaling {
            let fan_in = latent.shape().item();
            let alpha = latent
                .data()
                .chunks(fan_in)
                .map(|row| row.iter().map(|v| v.abs()).sum::<Real>() / fan_in as Real)
                .collect();
            layer = layer.with_alpha(alpha)?;
        }
        Ok(layer)
    }

    /// Per-output-channel scaling; every factor must be strictly positive.
    pub fn with_alpha(mut self, alpha: Vec<Real>) -> Result<Self> {
        if alpha.len() != self.weights.shape().n {
            return Err(shape_mismatch("binconv", "alpha length must equal C_out"));
        }
        if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidArgument("alpha must be strictly positive".into()));
        }
        self.alpha = Some(alpha);
        Ok(self)
    }

    pub fn weights(&self) -> &BitTensor {
        &self.weights
    }

    pub fn alpha(&self) -> Option<&[Real]> {
        self.alpha.as_deref()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn geometry(&self, input: Shape4) -> Result<(Shape4, ConvGeometry)> {
        let ws = self.weights.shape();
        if input.c != ws.c {
            return Err(shape_mismatch(
                "binconv",
                format!("input has {} channels, weights {ws} expect {}", input.c, ws.c),
            ));
        }
        let g = self.padding.geometry(input.h, input.w, ws.h, self.stride)?;
        Ok((
            Shape4 {
                n: input.n,
                c: ws.n,
                h: g.out_h,
                w: g.out_w,
            },
            g,
        ))
    }
}

/// Bit string of `len` bits stored in whole words.
struct BitString {
    words_per: usize,
    data: Vec<u64>,
}

impl BitString {
    fn new(count: usize, len: usize) -> Self {
        let words_per = len.div_ceil(64);
        BitString {
            words_per,
            data: vec![0; count * words_per],
        }
    }

    fn get(&self, i: usize) -> &[u64] {
        &self.data[i * self.words_per..(i + 1) * self.words_per]
    }

    /// ORs the low `k` bits of `bits` in at bit offset `at` of string `i`.
    #[inline]
    fn put(&mut self, i: usize, at: usize, bits: u64, k: usize) {
        let base = i * self.words_per;
        let (wi, off) = (at / 64, at % 64);
        self.data[base + wi] |= bits << off;
        if off + k > 64 {
            self.data[base + wi + 1] |= bits >> (64 - off);
        }
    }
}

#[inline]
fn low_mask(k: usize) -> u64 {
    if k >= 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

/// `len` bits starting at column `start` of a packed row (`start + len ≤ w`).
#[inline]
fn row_bits(row: &[u64], start: usize, len: usize) -> u64 {
    let (wi, off) = (start / 64, start % 64);
    let mut v = row[wi] >> off;
    if off + len > 64 {
        v |= row[wi + 1] << (64 - off);
    }
    v & low_mask(len)
}

/// Window of `k` taps starting at column `start` (can hang off either edge).
/// Returns the tap bits (out-of-range taps set to `fill`) and the mask of
/// in-range taps.
#[inline]
fn window(row: &[u64], width: usize, start: isize, k: usize, fill: bool) -> (u64, u64) {
    let j0 = (-start).max(0) as usize;
    let end = (start + k as isize).min(width as isize);
    if end <= start + j0 as isize {
        let bits = if fill { low_mask(k) } else { 0 };
        return (bits, 0);
    }
    let j1 = (end - start) as usize;
    let valid = low_mask(j1 - j0) << j0;
    let bits = row_bits(row, (start + j0 as isize) as usize, j1 - j0) << j0;
    let bits = if fill { bits | (low_mask(k) & !valid) } else { bits };
    (bits, valid)
}

/// XNOR-popcount convolution. Equals `conv2d(unpack(a), unpack(w))` exactly
/// (then times α[c] when scaling is enabled).
pub fn binconv(a: &BitTensor, layer: &BinConvLayer) -> Result<RealTensor> {
    let xs = a.shape();
    let (out_shape, g) = layer.geometry(xs)?;
    let k = g.k;
    let ws = layer.weights.shape();
    let taps = ws.c * k * k;
    let pad = layer.padding.pad_value();
    let needs_mask = matches!(layer.padding, Padding::Same(v) if v == 0.0);
    let fill = pad > 0.0;

    let mut wstr = BitString::new(ws.n, taps);
    for co in 0..ws.n {
        for ci in 0..ws.c {
            for ky in 0..k {
                let bits = layer.weights.row(co, ci, ky)[0] & low_mask(k);
                wstr.put(co, (ci * k + ky) * k, bits, k);
            }
        }
    }
    let tail = low_mask(match taps % 64 {
        0 => 64,
        r => r,
    });

    let positions = g.out_h * g.out_w;
    let mut out = vec![0.0; out_shape.len()];
    let mut cols = BitString::new(positions, taps);
    let mut masks = BitString::new(if needs_mask { positions } else { 0 }, taps);
    for n in 0..xs.n {
        cols.data.fill(0);
        masks.data.fill(0);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let start = (ox * g.stride) as isize - g.pad_left as isize;
                for ci in 0..ws.c {
                    for ky in 0..k {
                        let at = (ci * k + ky) * k;
                        let (bits, valid) = match g.in_y(oy, ky) {
                            Some(iy) => window(a.row(n, ci, iy), xs.w, start, k, fill),
                            None => (if fill { low_mask(k) } else { 0 }, 0),
                        };
                        cols.put(p, at, bits, k);
                        if needs_mask {
                            masks.put(p, at, valid, k);
                        }
                    }
                }
            }
        }
        for co in 0..ws.n {
            let wrow = wstr.get(co);
            let scale = layer.alpha.as_ref().map_or(1.0, |al| al[co]);
            let dst = &mut out[(n * ws.n + co) * positions..][..positions];
            for (p, d) in dst.iter_mut().enumerate() {
                let col = cols.get(p);
                let sum: i64 = if needs_mask {
                    let m = masks.get(p);
                    let mut valid = 0i64;
                    let mut mismatch = 0i64;
                    for i in 0..col.len() {
                        valid += m[i].count_ones() as i64;
                        mismatch += ((col[i] ^ wrow[i]) & m[i]).count_ones() as i64;
                    }
                    valid - 2 * mismatch
                } else {
                    let last = col.len() - 1;
                    let mut mismatch = 0i64;
                    for i in 0..last {
                        mismatch += (col[i] ^ wrow[i]).count_ones() as i64;
                    }
                    mismatch += ((col[last] ^ wrow[last]) & tail).count_ones() as i64;
                    taps as i64 - 2 * mismatch
                };
                *d = sum as Real * scale;
            }
        }
    }
    Ok(RealTensor::from_parts(out_shape, out))
}

/// Binary multiply-accumulates of one layer: output elements × k²·C_in.
pub fn count_bops(layer: &BinConvLayer, input: Shape4) -> Result<u64> {
    let ws = layer.weights.shape();
    let (out, _) = layer.geometry(input)?;
    Ok(bops_for(out, ws.c, ws.h))
}

/// BOPs from shapes alone: `output.len() · k² · c_in`.
pub fn bops_for(output: Shape4, c_in: usize, k: usize) -> u64 {
    output.len() as u64 * (k * k * c_in) as u64
}
