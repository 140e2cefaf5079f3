use super::{Real, RealTensor, Shape4};

/// Bit-packed rank-4 tensor of ±1 values.
///
/// Bit 1 encodes +1 and bit 0 encodes −1. Each W-row starts on a fresh
/// 64-bit word with bit `x % 64` of word `x / 64` (LSB first) holding column
/// `x`; padding bits past the row end are always zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Shape4,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    /// All −1.
    pub fn zeros(shape: Shape4) -> Self {
        let words_per_row = shape.w.div_ceil(64);
        BitTensor {
            shape,
            words_per_row,
            words: vec![0; shape.n * shape.c * shape.h * words_per_row],
        }
    }

    /// All +1.
    pub fn ones(shape: Shape4) -> Self {
        Self::from_fn(shape, |_, _, _, _| true)
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let mut t = Self::zeros(shape);
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    let base = t.row_offset(n, c, y);
                    for x in 0..shape.w {
                        if f(n, c, y, x) {
                            t.words[base + x / 64] |= 1 << (x % 64);
                        }
                    }
                }
            }
        }
        t
    }

    /// Rebuilds a tensor from raw words, e.g. read from a checkpoint.
    /// Returns `None` if the word count is wrong or padding bits are set.
    pub fn from_words(shape: Shape4, words: Vec<u64>) -> Option<Self> {
        let words_per_row = shape.w.div_ceil(64);
        if words.len() != shape.n * shape.c * shape.h * words_per_row {
            return None;
        }
        let t = BitTensor {
            shape,
            words_per_row,
            words,
        };
        t.padding_is_clear().then_some(t)
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    fn row_offset(&self, n: usize, c: usize, y: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.words_per_row
    }

    #[inline]
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[u64] {
        let o = self.row_offset(n, c, y);
        &self.words[o..o + self.words_per_row]
    }

    /// Words of all rows of one channel plane, contiguous.
    pub fn plane_words(&self, n: usize, c: usize) -> &[u64] {
        let o = self.row_offset(n, c, 0);
        &self.words[o..o + self.words_per_row * self.shape.h]
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> bool {
        let w = self.words[self.row_offset(n, c, y) + x / 64];
        (w >> (x % 64)) & 1 == 1
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, bit: bool) {
        let o = self.row_offset(n, c, y) + x / 64;
        let m = 1u64 << (x % 64);
        if bit {
            self.words[o] |= m;
        } else {
            self.words[o] &= !m;
        }
    }

    /// Numeric value (±1) at a position.
    #[inline]
    pub fn value(&self, n: usize, c: usize, y: usize, x: usize) -> Real {
        if self.get(n, c, y, x) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn count_ones_channel(&self, n: usize, c: usize) -> u64 {
        self.plane_words(n, c).iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Bitwise negation (every ±1 flips sign); padding stays clear.
    pub fn flipped(&self) -> BitTensor {
        let mut out = self.clone();
        let mask = row_tail_mask(self.shape.w);
        for (i, w) in out.words.iter_mut().enumerate() {
            *w = !*w;
            if i % self.words_per_row == self.words_per_row - 1 {
                *w &= mask;
            }
        }
        out
    }

    /// Single channel of one batch item as a 1×1×H×W tensor.
    pub fn channel_tensor(&self, n: usize, c: usize) -> BitTensor {
        let shape = Shape4 {
            n: 1,
            c: 1,
            h: self.shape.h,
            w: self.shape.w,
        };
        BitTensor {
            shape,
            words_per_row: self.words_per_row,
            words: self.plane_words(n, c).to_vec(),
        }
    }

    pub fn padding_is_clear(&self) -> bool {
        let mask = row_tail_mask(self.shape.w);
        self.words
            .chunks(self.words_per_row)
            .all(|row| row[row.len() - 1] & !mask == 0)
    }
}

/// Mask of the valid bits in the last word of a row of width `w`.
pub(crate) fn row_tail_mask(w: usize) -> u64 {
    match w % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Packs real values into ±1 bits: set iff the element is strictly positive.
pub fn pack(x: &RealTensor) -> BitTensor {
    let shape = x.shape();
    let mut out = BitTensor::zeros(shape);
    let wpr = out.words_per_row;
    for (r, row) in x.data().chunks(shape.w).enumerate() {
        let words = &mut out.words[r * wpr..(r + 1) * wpr];
        for (i, chunk) in row.chunks(64).enumerate() {
            let mut word = 0u64;
            for (b, &v) in chunk.iter().enumerate() {
                word |= ((v > 0.0) as u64) << b;
            }
            words[i] = word;
        }
    }
    out
}

pub fn unpack(b: &BitTensor) -> RealTensor {
    let shape = b.shape;
    let mut data = Vec::with_capacity(shape.len());
    for row in b.words.chunks(b.words_per_row) {
        for x in 0..shape.w {
            let bit = (row[x / 64] >> (x % 64)) & 1;
            data.push(if bit == 1 { 1.0 } else { -1.0 });
        }
    }
    RealTensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pack_follows_strict_positivity() {
        let x = RealTensor::from_vec(Shape4::new(1, 1, 1, 3).unwrap(), vec![0.5, 0.0, -0.3]).unwrap();
        let b = pack(&x);
        assert!(b.get(0, 0, 0, 0));
        assert!(!b.get(0, 0, 0, 1));
        assert!(!b.get(0, 0, 0, 2));
        assert_eq!(unpack(&b).data(), &[1.0, -1.0, -1.0]);
    }

    #[test]
    fn all_positive_packs_to_all_ones() {
        let s = Shape4::new(2, 3, 4, 70).unwrap();
        let b = pack(&RealTensor::full(s, 0.25));
        assert_eq!(b, BitTensor::ones(s));
        assert_eq!(b.count_ones() as usize, s.len());
        assert!(b.padding_is_clear());
        assert_eq!(b.words().len(), 2 * 3 * 4 * 2);
    }

    #[test]
    fn unpack_of_constant_bits() {
        let s = Shape4::new(1, 2, 3, 65).unwrap();
        assert!(unpack(&BitTensor::ones(s)).data().iter().all(|&v| v == 1.0));
        assert!(unpack(&BitTensor::zeros(s)).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn pack_matches_scalar_sign_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Shape4::new(1, 2, 5, 70).unwrap();
        let x = RealTensor::uniform(s, -1.0, 1.0, &mut rng);
        let back = unpack(&pack(&x));
        for (i, (&v, &u)) in x.data().iter().zip(back.data()).enumerate() {
            let expected = if v > 0.0 { 1.0 } else { -1.0 };
            assert_eq!(u, expected, "element {i}");
        }
    }

    #[test]
    fn flipped_keeps_padding_clear() {
        let s = Shape4::new(1, 1, 2, 5).unwrap();
        let b = BitTensor::zeros(s).flipped();
        assert_eq!(b, BitTensor::ones(s));
        assert!(b.padding_is_clear());
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        let s = Shape4::new(1, 1, 1, 3).unwrap();
        assert!(BitTensor::from_words(s, vec![0b1000]).is_none());
        assert!(BitTensor::from_words(s, vec![0b101]).is_some());
        assert!(BitTensor::from_words(s, vec![0, 0]).is_none());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            n in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..140, seed in any::<u64>()
        ) {
            let s = Shape4::new(n, c, h, w).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = BitTensor::from_fn(s, |_, _, _, _| rand::Rng::random::<bool>(&mut rng));
            let back = pack(&unpack(&b));
            prop_assert!(back.padding_is_clear());
            prop_assert_eq!(back, b);
        }
    }
}
