//! Dense and bit-packed rank-4 tensors, convolution kernels and a small
//! tape-based reverse-mode autodiff graph.
//!
//! All tensors are laid out N, C, H, W in row-major order. Real values are
//! computed in `f64`; the checkpoint format stores them as IEEE-754 `f32`.

mod bits;
pub mod checkpoint;
pub mod conv;
mod gemm;
pub mod graph;
pub mod layers;

pub use bits::{pack, unpack, BitTensor};
pub use graph::{BatchNormMode, Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

/// Scalar type used for every real-valued computation.
pub type Real = f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape4 { n, c, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(self.dims()));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or(Error::InvalidShape(self.dims()))?;
        Ok(())
    }

    pub fn scalar() -> Self {
        Shape4 {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    shape: Shape4,
    data: Vec<Real>,
    grad: Option<Vec<Real>>,
}

impl RealTensor {
    /// Builds a tensor, checking the length and that every value is finite.
    pub fn from_vec(shape: Shape4, data: Vec<Real>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected: shape.len(),
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(RealTensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Kernel-internal constructor; callers guarantee the length.
    pub(crate) fn from_parts(shape: Shape4, data: Vec<Real>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        RealTensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: Real) -> Self {
        RealTensor::from_parts(shape, vec![value; shape.len()])
    }

    pub fn scalar(value: Real) -> Self {
        RealTensor::from_parts(Shape4::scalar(), vec![value])
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> Real) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        RealTensor::from_parts(shape, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: Real, hi: Real, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        RealTensor::from_parts(shape, data)
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape4, std: Real, rng: &mut R) -> Self {
        let data = (0..shape.len())
            .map(|_| {
                let z: Real = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        RealTensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<Real>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: self.shape,
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<Real>> {
        self.grad.take()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// The H×W plane of one channel of one batch item.
    pub fn channel(&self, n: usize, c: usize) -> &[Real] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Copies one channel plane out as a 1×1×H×W tensor.
    pub fn channel_tensor(&self, n: usize, c: usize) -> RealTensor {
        RealTensor::from_parts(
            Shape4 {
                n: 1,
                c: 1,
                h: self.shape.h,
                w: self.shape.w,
            },
            self.channel(n, c).to_vec(),
        )
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> RealTensor {
        RealTensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(mut self, shape: Shape4) -> Result<Self> {
        shape.validate()?;
        if shape.len() != self.data.len() {
            return Err(shape_mismatch(
                "reshape",
                format!("{} has {} elements, {} requested", self.shape, self.data.len(), shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat_batch(items: &[RealTensor]) -> Result<RealTensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.item() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (base.c, base.h, base.w) {
                return Err(shape_mismatch("concat_batch", format!("{s} vs {base}")));
            }
            data.extend_from_slice(&t.data);
            n += s.n;
        }
        Ok(RealTensor::from_parts(base.with_n(n), data))
    }

    /// Batch items `start..start + count` as a new tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<RealTensor> {
        if count == 0 || start + count > self.shape.n {
            return Err(Error::InvalidArgument(format!(
                "batch slice {start}..{} of {}",
                start + count,
                self.shape.n
            )));
        }
        let item = self.shape.item();
        Ok(RealTensor::from_parts(
            self.shape.with_n(count),
            self.data[start * item..(start + count) * item].to_vec(),
        ))
    }

    pub fn max_abs_diff(&self, other: &RealTensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

/// Spatial padding for convolutions.
///
/// `Same(v)` pads with the constant `v`; the output keeps `ceil(H / stride)`
/// rows with the extra row (if any) added at the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same(Real),
}

impl Padding {
    /// Zero padding, the default for real-valued tensors.
    pub const SAME_ZERO: Padding = Padding::Same(0.0);
    /// −1 padding, the binary background.
    pub const SAME_MINUS_ONE: Padding = Padding::Same(-1.0);

    pub fn pad_value(&self) -> Real {
        match *self {
            Padding::Valid => 0.0,
            Padding::Same(v) => v,
        }
    }

    pub fn geometry(&self, in_h: usize, in_w: usize, k: usize, stride: usize) -> Result<ConvGeometry> {
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {k} and stride {stride} must be positive"
            )));
        }
        match self {
            Padding::Valid => {
                if in_h < k || in_w < k {
                    return Err(shape_mismatch(
                        "conv",
                        format!("{in_h}x{in_w} input is smaller than {k}x{k} kernel"),
                    ));
                }
                Ok(ConvGeometry {
                    in_h,
                    in_w,
                    out_h: (in_h - k) / stride + 1,
                    out_w: (in_w - k) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                    k,
                    stride,
                })
            }
            Padding::Same(_) => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let total_h = ((out_h - 1) * stride + k).saturating_sub(in_h);
                let total_w = ((out_w - 1) * stride + k).saturating_sub(in_w);
                Ok(ConvGeometry {
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                    pad_top: total_h / 2,
                    pad_left: total_w / 2,
                    k,
                    stride,
                })
            }
        }
    }
}

/// Resolved window placement of a k×k sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Input coordinate for output row/col `o` and tap `t`, or `None` when it
    /// falls in the padding.
    #[inline]
    pub fn input_pos(&self, o: usize, t: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    #[inline]
    pub fn in_y(&self, oy: usize, ky: usize) -> Option<usize> {
        self.input_pos(oy, ky, self.pad_top, self.in_h)
    }

    #[inline]
    pub fn in_x(&self, ox: usize, kx: usize) -> Option<usize> {
        self.input_pos(ox, kx, self.pad_left, self.in_w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_dims() {
        assert!(matches!(Shape4::new(1, 0, 2, 2), Err(Error::InvalidShape(_))));
        assert!(Shape4::new(1, 1, 1, 1).is_ok());
    }

    #[test]
    fn from_vec_rejects_non_finite_and_wrong_length() {
        let s = Shape4::new(1, 1, 1, 2).unwrap();
        assert!(matches!(
            RealTensor::from_vec(s, vec![1.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            RealTensor::from_vec(s, vec![1.0, Real::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn same_geometry_matches_ceil_division() {
        let g = Padding::SAME_ZERO.geometry(32, 32, 3, 2).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (16, 16, 0, 0));
        let g = Padding::SAME_ZERO.geometry(7, 7, 3, 2).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
        let g = Padding::SAME_ZERO.geometry(8, 8, 3, 1).unwrap();
        assert_eq!((g.out_h, g.pad_top), (8, 1));
        let g = Padding::Valid.geometry(8, 8, 3, 2).unwrap();
        assert_eq!(g.out_h, 3);
        assert!(Padding::Valid.geometry(2, 8, 3, 1).is_err());
    }
}
