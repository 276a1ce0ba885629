//! Dense rank-4 float tensors and bit-packed ±1 tensors.
//!
//! `FloatTensor` carries full-precision activations and latent weights in
//! row-major `(batch, channel, height, width)` order. `BitTensor` carries
//! the same logical shape with one bit per element: bit 1 encodes +1 and
//! bit 0 encodes −1. Activations pack along the innermost (width) axis;
//! weights pack along the flattened per-filter axis so a whole filter sits
//! in consecutive words. Trailing bits in the last word of every row are
//! kept at zero and never enter a reduction.

use crate::error::{Error, Result};

/// Logical `(batch, channels, height, width)` shape. Weight tensors reuse
/// the same carrier with `(c_out, c_in, k, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, i: usize, j: usize) -> usize {
        ((b * self.c + c) * self.h + i) * self.w + j
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.b, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn zeros(shape: Shape) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim("FloatTensor::from_vec", shape.numel(), data.len()));
        }
        Ok(FloatTensor { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, i: usize, j: usize) -> f32 {
        self.data[self.shape.idx(b, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, i: usize, j: usize, v: f32) {
        let idx = self.shape.idx(b, c, i, j);
        self.data[idx] = v;
    }

    /// Contiguous spatial row `(b, c, i, ..)`.
    #[inline]
    pub fn row(&self, b: usize, c: usize, i: usize) -> &[f32] {
        let start = self.shape.idx(b, c, i, 0);
        &self.data[start..start + self.shape.w]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FloatTensor {
        FloatTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Bit-packed ±1 tensor. `row_len` logical bits per packed row; rows run
/// in row-major order over the remaining axes.
#[derive(Clone, Debug, PartialEq)]
pub struct BitTensor {
    shape: Shape,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitTensor {
    fn empty(shape: Shape, row_len: usize) -> Self {
        debug_assert!(row_len > 0 && shape.numel() % row_len == 0);
        let rows = shape.numel() / row_len;
        let words_per_row = row_len.div_ceil(64);
        BitTensor {
            shape,
            row_len,
            words_per_row,
            words: vec![0u64; rows * words_per_row],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Logical bits per packed row.
    #[inline]
    pub fn row_len(&self) -> usize {
        self.row_len
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape.numel() / self.row_len
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Decode one element by flat logical index (+1.0 or −1.0).
    #[inline]
    pub fn get_flat(&self, idx: usize) -> f32 {
        let r = idx / self.row_len;
        let o = idx % self.row_len;
        let word = self.words[r * self.words_per_row + o / 64];
        if (word >> (o % 64)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Gather `len <= 64` bits starting at signed position `start` of a packed
/// row holding `nbits` logical bits. Positions outside `[0, nbits)` read
/// as zero.
#[inline]
pub(crate) fn extract_bits(row: &[u64], nbits: usize, start: isize, len: usize) -> u64 {
    debug_assert!(len >= 1 && len <= 64);
    let lo = start.max(0) as usize;
    let hi = ((start + len as isize).min(nbits as isize)).max(0) as usize;
    if lo >= hi {
        return 0;
    }
    let take = hi - lo;
    let w0 = lo / 64;
    let off = lo % 64;
    let mut v = row[w0] >> off;
    if off != 0 && w0 + 1 < row.len() && off + take > 64 {
        v |= row[w0 + 1] << (64 - off);
    }
    if take < 64 {
        v &= (1u64 << take) - 1;
    }
    // Align to where the clipped range sits inside the requested window.
    v << (lo as isize - start) as usize
}

/// OR `len <= 64` bits of `val` into `buf` at bit offset `off`.
#[inline]
pub(crate) fn write_bits(buf: &mut [u64], off: usize, val: u64, len: usize) {
    debug_assert!(len >= 1 && len <= 64);
    let w0 = off / 64;
    let r = off % 64;
    buf[w0] |= val << r;
    if r != 0 && r + len > 64 {
        buf[w0 + 1] |= val >> (64 - r);
    }
}

/// Per-channel learnable binarization thresholds (one per input channel).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector(pub Vec<f32>);

impl ThresholdVector {
    pub fn zeros(channels: usize) -> Self {
        ThresholdVector(vec![0.0; channels])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-output-channel scaling factors: the mean absolute latent weight of
/// each filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScales(pub Vec<f32>);

/// Binarize activations: bit = 1 where `x + t[c] >= 0` (so an exact zero
/// maps to +1). Output packs along the width axis.
pub fn sign_binarize(x: &FloatTensor, t: &ThresholdVector) -> Result<BitTensor> {
    let s = x.shape();
    if t.len() != s.c {
        return Err(Error::dim("sign_binarize", s.c, t.len()));
    }
    let mut out = BitTensor::empty(s, s.w);
    let mut r = 0;
    for b in 0..s.b {
        for c in 0..s.c {
            let tc = t.0[c];
            for i in 0..s.h {
                let src = x.row(b, c, i);
                let row = out.row_words_mut(r);
                for (j, &v) in src.iter().enumerate() {
                    if v + tc >= 0.0 {
                        row[j / 64] |= 1u64 << (j % 64);
                    }
                }
                r += 1;
            }
        }
    }
    Ok(out)
}

/// Binarize a weight tensor (threshold is identically zero). Each output
/// filter packs as one contiguous row of `c_in * k * k` bits in `(c, u, v)`
/// order.
pub fn binarize_weights(w: &FloatTensor) -> BitTensor {
    let s = w.shape();
    let row_len = s.c * s.h * s.w;
    let mut out = BitTensor::empty(s, row_len);
    for o in 0..s.b {
        let row = out.row_words_mut(o);
        let base = o * row_len;
        for p in 0..row_len {
            if w.data()[base + p] >= 0.0 {
                row[p / 64] |= 1u64 << (p % 64);
            }
        }
    }
    out
}

/// Pack a strictly ±1 tensor along the width axis.
pub fn pack(x: &FloatTensor) -> Result<BitTensor> {
    pack_with_row_len(x, x.shape().w)
}

/// Pack a strictly ±1 weight tensor with one row per output filter.
pub fn pack_filters(x: &FloatTensor) -> Result<BitTensor> {
    let s = x.shape();
    pack_with_row_len(x, s.c * s.h * s.w)
}

fn pack_with_row_len(x: &FloatTensor, row_len: usize) -> Result<BitTensor> {
    let mut out = BitTensor::empty(x.shape(), row_len);
    for (idx, &v) in x.data().iter().enumerate() {
        if v == 1.0 {
            let r = idx / row_len;
            let o = idx % row_len;
            out.words[r * out.words_per_row + o / 64] |= 1u64 << (o % 64);
        } else if v != -1.0 {
            return Err(Error::domain(
                "pack",
                format!("element {idx} is {v}, expected exactly +1 or -1"),
            ));
        }
    }
    Ok(out)
}

/// Decode back to a ±1 float tensor.
pub fn unpack(x: &BitTensor) -> FloatTensor {
    let n = x.shape.numel();
    let mut data = Vec::with_capacity(n);
    for idx in 0..n {
        data.push(x.get_flat(idx));
    }
    FloatTensor {
        shape: x.shape,
        data,
    }
}

/// Mean absolute latent weight per output filter.
pub fn compute_scales(w: &FloatTensor) -> ChannelScales {
    let s = w.shape();
    let filter = s.c * s.h * s.w;
    let mut out = Vec::with_capacity(s.b);
    for o in 0..s.b {
        let mut acc = 0.0f64;
        for &v in &w.data()[o * filter..(o + 1) * filter] {
            acc += v.abs() as f64;
        }
        out.push((acc / filter as f64) as f32);
    }
    ChannelScales(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1x1(v: f32) -> FloatTensor {
        FloatTensor::from_vec(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn sign_zero_maps_to_plus_one() {
        let bt = sign_binarize(&t1x1(0.0), &ThresholdVector::zeros(1)).unwrap();
        assert_eq!(unpack(&bt).data(), &[1.0]);
        let bt = sign_binarize(&t1x1(-0.5), &ThresholdVector::zeros(1)).unwrap();
        assert_eq!(unpack(&bt).data(), &[-1.0]);
    }

    #[test]
    fn sign_threshold_shifts_decision() {
        // x + t >= 0: x = -0.5 with t = 0.5 lands exactly on the boundary.
        let bt = sign_binarize(&t1x1(-0.5), &ThresholdVector(vec![0.5])).unwrap();
        assert_eq!(unpack(&bt).data(), &[1.0]);
    }

    #[test]
    fn sign_binarize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(2, 3, 8, 8);
        let x = FloatTensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let t = ThresholdVector((0..3).map(|_| rng.random_range(-0.5..0.5)).collect());
        let got = unpack(&sign_binarize(&x, &t).unwrap());
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..8 {
                    for j in 0..8 {
                        let want = if x.get(b, c, i, j) + t.0[c] >= 0.0 { 1.0 } else { -1.0 };
                        assert_eq!(got.get(b, c, i, j), want);
                    }
                }
            }
        }
    }

    #[test]
    fn sign_binarize_rejects_bad_threshold_len() {
        let x = FloatTensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(matches!(
            sign_binarize(&x, &ThresholdVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pack_rejects_non_pm1() {
        let x = t1x1(0.5);
        assert!(matches!(pack(&x), Err(Error::Domain { .. })));
    }

    #[test]
    fn pack_word_boundary() {
        // 65 elements of +1: second word of the row holds exactly one live bit.
        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 65), vec![1.0; 65]).unwrap();
        let bt = pack(&x).unwrap();
        assert_eq!(bt.words_per_row, 2);
        assert_eq!(bt.row_words(0)[0], u64::MAX);
        assert_eq!(bt.row_words(0)[1].count_ones(), 1);
        assert_eq!(unpack(&bt), x);
    }

    #[test]
    fn pack_small_pattern() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -1.0, 1.0]).unwrap();
        let bt = pack(&x).unwrap();
        assert_eq!(bt.row_words(0)[0], 0b101);
        assert_eq!(unpack(&bt), x);
    }

    #[test]
    fn binarize_already_pm1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(1, 2, 5, 7);
        let x = FloatTensor::from_vec(
            shape,
            (0..shape.numel())
                .map(|_| if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        let bt = sign_binarize(&x, &ThresholdVector::zeros(2)).unwrap();
        assert_eq!(unpack(&bt), x);
    }

    #[test]
    fn scales_simple_values() {
        let w = FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 0.5, -0.5]).unwrap();
        let a = compute_scales(&w);
        assert_eq!(a.0, vec![0.75]);
        let w = FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        assert_eq!(compute_scales(&w).0, vec![1.0]);
    }

    #[test]
    fn scales_match_loop_oracle_and_ignore_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape::new(4, 3, 3, 3);
        let data: Vec<f32> = (0..shape.numel()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = FloatTensor::from_vec(shape, data.clone()).unwrap();
        let a = compute_scales(&w);
        let filter = 27;
        for o in 0..4 {
            let mean: f64 = data[o * filter..(o + 1) * filter]
                .iter()
                .map(|v| v.abs() as f64)
                .sum::<f64>()
                / filter as f64;
            // the stored value is the f64 mean rounded once to f32
            assert_eq!(a.0[o], mean as f32, "o={o}");
            let rel = ((a.0[o] as f64 - mean) / mean).abs();
            assert!(rel < 1e-7, "o={o} rel={rel}");
        }
        // sign flips leave the scales untouched
        let flipped = w.map(|v| -v);
        assert_eq!(compute_scales(&flipped).0, a.0);
    }

    #[test]
    fn extract_and_write_bits_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let nbits = rng.random_range(1..200usize);
            let row: Vec<u64> = (0..nbits.div_ceil(64)).map(|_| rng.random::<u64>()).collect();
            // zero out padding so the fixture matches the packed invariant
            let mut row = row;
            if nbits % 64 != 0 {
                let last = row.len() - 1;
                row[last] &= (1u64 << (nbits % 64)) - 1;
            }
            let start = rng.random_range(-70i64..(nbits as i64 + 10)) as isize;
            let len = rng.random_range(1..=64usize);
            let got = extract_bits(&row, nbits, start, len);
            let mut want = 0u64;
            for q in 0..len {
                let p = start + q as isize;
                if p >= 0 && (p as usize) < nbits {
                    let bit = (row[p as usize / 64] >> (p as usize % 64)) & 1;
                    want |= bit << q;
                }
            }
            assert_eq!(got, want, "nbits={nbits} start={start} len={len}");

            let off = rng.random_range(0..128usize);
            let mut buf = vec![0u64; 4];
            write_bits(&mut buf, off, got, len);
            for q in 0..len {
                let bit = (buf[(off + q) / 64] >> ((off + q) % 64)) & 1;
                assert_eq!(bit, (got >> q) & 1);
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(
            b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..80,
            seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape::new(b, c, h, w);
            let x = FloatTensor::from_vec(
                shape,
                (0..shape.numel())
                    .map(|_| if rng.random_range(0.0..1.0) < 0.5 { -1.0f32 } else { 1.0 })
                    .collect(),
            ).unwrap();
            let bt = pack(&x).unwrap();
            prop_assert_eq!(unpack(&bt), x.clone());
            let bf = pack_filters(&x).unwrap();
            prop_assert_eq!(unpack(&bf), x);
        }
    }
}
