//! Frequency-aware gate prediction.
//!
//! A single-level orthonormal Haar transform splits each channel into four
//! sub-bands; mean absolute responses of the bands yield a high-frequency
//! ratio and an orientation-dominance score, which join per-channel
//! activation statistics (mean, standard deviation, mean absolute value)
//! in a 5-vector. A shared affine head plus sigmoid maps every per-channel
//! 5-vector to a gate value in (0,1) that conditions the channel
//! aggregation of the binary convolution.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

/// Denominator guard for the two frequency descriptors.
pub const DESCRIPTOR_EPS: f64 = 1e-8;

/// Feature order inside the gate-head input vector.
pub const DESCRIPTOR_ORDER: &str = "mu,sigma,m_abs,high_freq_ratio,orientation";

const GATE_MAX: f32 = 0.999_999_94; // largest f32 below 1.0
const GATE_MIN: f32 = f32::MIN_POSITIVE;

/// Per-sample, per-channel gate values, strictly inside (0,1) when produced
/// by [`predict_gate`].
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    batch: usize,
    channels: usize,
    values: Vec<f32>,
}

impl GateVector {
    pub fn uniform(batch: usize, channels: usize, v: f32) -> Self {
        GateVector { batch, channels, values: vec![v; batch * channels] }
    }

    pub fn from_values(batch: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != batch * channels {
            return Err(Error::dim("GateVector", batch * channels, values.len()));
        }
        Ok(GateVector { batch, channels, values })
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize) -> f32 {
        self.values[b * self.channels + c]
    }

    #[inline]
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// `Some(per-sample value)` when every channel of a sample carries the
    /// same gate (bitwise), which is what licenses the packed conv path.
    pub fn uniform_per_sample(&self) -> Option<Vec<f32>> {
        let mut out = Vec::with_capacity(self.batch);
        for b in 0..self.batch {
            let row = &self.values[b * self.channels..(b + 1) * self.channels];
            let v = row[0];
            if row.iter().any(|&x| x.to_bits() != v.to_bits()) {
                return None;
            }
            out.push(v);
        }
        Some(out)
    }
}

/// The four sub-bands of one decomposition level. First letter names the
/// row-axis filter, second the column-axis filter.
#[derive(Clone, Debug)]
pub struct SubBands {
    pub ll: FloatTensor,
    pub lh: FloatTensor,
    pub hl: FloatTensor,
    pub hh: FloatTensor,
}

/// Replicate the last row/column so both spatial dims are even.
pub fn pad_to_even(x: &FloatTensor) -> FloatTensor {
    let s = x.shape();
    let (h2, w2) = (s.h + s.h % 2, s.w + s.w % 2);
    if h2 == s.h && w2 == s.w {
        return x.clone();
    }
    let mut out = FloatTensor::zeros(Shape::new(s.b, s.c, h2, w2));
    for b in 0..s.b {
        for c in 0..s.c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let v = x.get(b, c, i.min(s.h - 1), j.min(s.w - 1));
                    out.set(b, c, i, j, v);
                }
            }
        }
    }
    out
}

/// Orthonormal 2×2 Haar analysis. For each block `[[a, b], [c, d]]`:
/// `ll=(a+b+c+d)/2`, `lh=(a−b+c−d)/2`, `hl=(a+b−c−d)/2`, `hh=(a−b−c+d)/2`.
pub fn haar_dwt(x: &FloatTensor) -> Result<SubBands> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::domain(
            "haar_dwt",
            format!("spatial dims must be even, got ({},{})", s.h, s.w),
        ));
    }
    let half = Shape::new(s.b, s.c, s.h / 2, s.w / 2);
    let mut ll = FloatTensor::zeros(half);
    let mut lh = FloatTensor::zeros(half);
    let mut hl = FloatTensor::zeros(half);
    let mut hh = FloatTensor::zeros(half);
    for b in 0..s.b {
        for c in 0..s.c {
            for i in 0..half.h {
                let top = x.row(b, c, 2 * i);
                let bot = x.row(b, c, 2 * i + 1);
                for j in 0..half.w {
                    let (a, bb) = (top[2 * j], top[2 * j + 1]);
                    let (cc, d) = (bot[2 * j], bot[2 * j + 1]);
                    ll.set(b, c, i, j, 0.5 * (a + bb + cc + d));
                    lh.set(b, c, i, j, 0.5 * (a - bb + cc - d));
                    hl.set(b, c, i, j, 0.5 * (a + bb - cc - d));
                    hh.set(b, c, i, j, 0.5 * (a - bb - cc + d));
                }
            }
        }
    }
    Ok(SubBands { ll, lh, hl, hh })
}

/// Inverse of [`haar_dwt`].
pub fn haar_idwt(sb: &SubBands) -> FloatTensor {
    let h = sb.ll.shape();
    let mut out = FloatTensor::zeros(Shape::new(h.b, h.c, h.h * 2, h.w * 2));
    for b in 0..h.b {
        for c in 0..h.c {
            for i in 0..h.h {
                for j in 0..h.w {
                    let (ll, lh) = (sb.ll.get(b, c, i, j), sb.lh.get(b, c, i, j));
                    let (hl, hh) = (sb.hl.get(b, c, i, j), sb.hh.get(b, c, i, j));
                    out.set(b, c, 2 * i, 2 * j, 0.5 * (ll + lh + hl + hh));
                    out.set(b, c, 2 * i, 2 * j + 1, 0.5 * (ll - lh + hl - hh));
                    out.set(b, c, 2 * i + 1, 2 * j, 0.5 * (ll + lh - hl - hh));
                    out.set(b, c, 2 * i + 1, 2 * j + 1, 0.5 * (ll - lh - hl + hh));
                }
            }
        }
    }
    out
}

/// Mean absolute response of each sub-band, per sample and channel.
#[derive(Clone, Debug)]
pub struct BandEnergies {
    pub batch: usize,
    pub channels: usize,
    pub ll: Vec<f32>,
    pub lh: Vec<f32>,
    pub hl: Vec<f32>,
    pub hh: Vec<f32>,
}

fn mean_abs_per_channel(x: &FloatTensor) -> Vec<f32> {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(s.b * s.c);
    for bc in 0..s.b * s.c {
        let mut acc = 0.0f64;
        for &v in &x.data()[bc * plane..(bc + 1) * plane] {
            acc += v.abs() as f64;
        }
        out.push((acc / plane as f64) as f32);
    }
    out
}

pub fn subband_energies(sb: &SubBands) -> BandEnergies {
    let s = sb.ll.shape();
    BandEnergies {
        batch: s.b,
        channels: s.c,
        ll: mean_abs_per_channel(&sb.ll),
        lh: mean_abs_per_channel(&sb.lh),
        hl: mean_abs_per_channel(&sb.hl),
        hh: mean_abs_per_channel(&sb.hh),
    }
}

/// High-frequency ratio in `[0,1]` and orientation dominance in `[0.5,1]`.
#[derive(Clone, Debug)]
pub struct FreqDescriptors {
    pub batch: usize,
    pub channels: usize,
    pub high_freq_ratio: Vec<f32>,
    pub orientation: Vec<f32>,
}

/// `r = detail / (total + ε)`; `s = (max(lh,hl) + ε/2) / (lh + hl + ε)`.
/// The half-ε in the numerator keeps `s` pinned to 0.5 when both
/// directional bands vanish, so the `[0.5, 1]` range holds for every input.
pub fn freq_descriptors(e: &BandEnergies) -> FreqDescriptors {
    let n = e.ll.len();
    let mut high_freq_ratio = Vec::with_capacity(n);
    let mut orientation = Vec::with_capacity(n);
    for i in 0..n {
        let (ll, lh, hl, hh) = (e.ll[i] as f64, e.lh[i] as f64, e.hl[i] as f64, e.hh[i] as f64);
        let detail = lh + hl + hh;
        high_freq_ratio.push((detail / (ll + detail + DESCRIPTOR_EPS)) as f32);
        orientation.push(((lh.max(hl) + DESCRIPTOR_EPS / 2.0) / (lh + hl + DESCRIPTOR_EPS)) as f32);
    }
    FreqDescriptors {
        batch: e.batch,
        channels: e.channels,
        high_freq_ratio,
        orientation,
    }
}

/// Per-sample, per-channel spatial statistics. The standard deviation is
/// the population form (divisor `h*w`).
#[derive(Clone, Debug)]
pub struct StatsDescriptors {
    pub batch: usize,
    pub channels: usize,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub m_abs: Vec<f32>,
}

pub fn stats_descriptors(x: &FloatTensor) -> StatsDescriptors {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut mu = Vec::with_capacity(s.b * s.c);
    let mut sigma = Vec::with_capacity(s.b * s.c);
    let mut m_abs = Vec::with_capacity(s.b * s.c);
    for bc in 0..s.b * s.c {
        let d = &x.data()[bc * plane..(bc + 1) * plane];
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        let ma = d.iter().map(|&v| v.abs() as f64).sum::<f64>() / plane as f64;
        mu.push(mean as f32);
        sigma.push(var.sqrt() as f32);
        m_abs.push(ma as f32);
    }
    StatsDescriptors { batch: s.b, channels: s.c, mu, sigma, m_abs }
}

/// The full conditioning set for one tensor: statistics plus frequency
/// descriptors, one 5-vector per (sample, channel).
#[derive(Clone, Debug)]
pub struct Descriptors {
    pub stats: StatsDescriptors,
    pub freq: FreqDescriptors,
}

impl Descriptors {
    #[inline]
    pub fn batch(&self) -> usize {
        self.stats.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.stats.channels
    }

    /// `[mu, sigma, m_abs, high_freq_ratio, orientation]` for one channel.
    #[inline]
    pub fn feature(&self, b: usize, c: usize) -> [f32; 5] {
        let i = b * self.channels() + c;
        [
            self.stats.mu[i],
            self.stats.sigma[i],
            self.stats.m_abs[i],
            self.freq.high_freq_ratio[i],
            self.freq.orientation[i],
        ]
    }
}

/// Compute the conditioning descriptors of a full-precision tensor. Odd
/// spatial dims are edge-replicated to even before the wavelet stage;
/// statistics always use the original tensor.
pub fn descriptors(x: &FloatTensor) -> Descriptors {
    let padded = pad_to_even(x);
    let sb = haar_dwt(&padded).expect("padded dims are even");
    let freq = freq_descriptors(&subband_energies(&sb));
    Descriptors { stats: stats_descriptors(x), freq }
}

/// Shared affine head mapping each 5-vector to a pre-sigmoid score.
#[derive(Clone, Debug, PartialEq)]
pub struct GateHead {
    pub weight: [f32; 5],
    pub bias: f32,
}

impl GateHead {
    pub fn zeros() -> Self {
        GateHead { weight: [0.0; 5], bias: 0.0 }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gate values from precomputed descriptors. Clamped away from the
/// endpoints so the open-interval invariant survives f32 saturation.
pub fn gate_from_descriptors(d: &Descriptors, head: &GateHead) -> GateVector {
    let (batch, channels) = (d.batch(), d.channels());
    let mut values = Vec::with_capacity(batch * channels);
    for b in 0..batch {
        for c in 0..channels {
            let f = d.feature(b, c);
            let mut z = head.bias as f64;
            for (w, x) in head.weight.iter().zip(f.iter()) {
                z += *w as f64 * *x as f64;
            }
            values.push((sigmoid(z) as f32).clamp(GATE_MIN, GATE_MAX));
        }
    }
    GateVector { batch, channels, values }
}

/// Full gate pipeline: descriptors, shared head, sigmoid.
pub fn predict_gate(x: &FloatTensor, head: &GateHead) -> GateVector {
    gate_from_descriptors(&descriptors(x), head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, seed: u64, range: std::ops::Range<f32>) -> FloatTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FloatTensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.random_range(range.clone())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn haar_constant_block() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 4]).unwrap();
        let sb = haar_dwt(&x).unwrap();
        assert_eq!(sb.ll.data(), &[2.0]);
        assert_eq!(sb.lh.data(), &[0.0]);
        assert_eq!(sb.hl.data(), &[0.0]);
        assert_eq!(sb.hh.data(), &[0.0]);
    }

    #[test]
    fn haar_vertical_stripe_is_pure_lh() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let sb = haar_dwt(&x).unwrap();
        assert_eq!(sb.lh.data(), &[2.0]);
        assert_eq!(sb.ll.data(), &[0.0]);
        assert_eq!(sb.hl.data(), &[0.0]);
        assert_eq!(sb.hh.data(), &[0.0]);
    }

    #[test]
    fn haar_conserves_energy_and_inverts() {
        let x = random_tensor(Shape::new(1, 2, 8, 8), 17, -1.0..1.0);
        let sb = haar_dwt(&x).unwrap();
        let e_in: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let e_out: f64 = [&sb.ll, &sb.lh, &sb.hl, &sb.hh]
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64).powi(2))
            .sum();
        assert!(((e_in - e_out) / e_in).abs() < 1e-5, "{e_in} vs {e_out}");
        let back = haar_idwt(&sb);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn haar_rejects_odd_dims() {
        let x = FloatTensor::zeros(Shape::new(1, 1, 3, 4));
        assert!(haar_dwt(&x).is_err());
        // edge replication fixes it up
        let padded = pad_to_even(&x);
        assert_eq!(padded.shape(), Shape::new(1, 1, 4, 4));
    }

    #[test]
    fn pad_replicates_edges() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_to_even(&x);
        assert_eq!(p.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(p.get(0, 0, 1, 3), 3.0);
        assert_eq!(p.get(0, 0, 1, 0), 1.0);
    }

    #[test]
    fn energies_constant_and_zero() {
        let zero = FloatTensor::zeros(Shape::new(1, 1, 4, 4));
        let sb = haar_dwt(&zero).unwrap();
        let e = subband_energies(&sb);
        assert_eq!(e.ll[0], 0.0);

        let sb = SubBands {
            ll: FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![3.0; 4]).unwrap(),
            lh: FloatTensor::zeros(Shape::new(1, 1, 2, 2)),
            hl: FloatTensor::zeros(Shape::new(1, 1, 2, 2)),
            hh: FloatTensor::zeros(Shape::new(1, 1, 2, 2)),
        };
        assert_eq!(subband_energies(&sb).ll[0], 3.0);
    }

    #[test]
    fn energies_match_loop_oracle() {
        let x = random_tensor(Shape::new(2, 3, 6, 6), 5, -2.0..2.0);
        let sb = haar_dwt(&x).unwrap();
        let e = subband_energies(&sb);
        for bc in 0..6 {
            let plane = 9;
            let want: f64 = sb.lh.data()[bc * plane..(bc + 1) * plane]
                .iter()
                .map(|v| v.abs() as f64)
                .sum::<f64>()
                / plane as f64;
            // stored energy is the f64 mean rounded once to f32
            assert_eq!(e.lh[bc], want as f32);
        }
    }

    fn energies_from(ll: f32, lh: f32, hl: f32, hh: f32) -> BandEnergies {
        BandEnergies {
            batch: 1,
            channels: 1,
            ll: vec![ll],
            lh: vec![lh],
            hl: vec![hl],
            hh: vec![hh],
        }
    }

    #[test]
    fn freq_descriptor_arithmetic() {
        let f = freq_descriptors(&energies_from(3.0, 1.0, 1.0, 1.0));
        assert!((f.high_freq_ratio[0] - 0.5).abs() < 1e-6);

        let f = freq_descriptors(&energies_from(1.0, 2.0, 2.0, 0.0));
        assert_eq!(f.orientation[0], 0.5); // symmetric directional bands

        let f = freq_descriptors(&energies_from(1.0, 3.0, 1.0, 0.0));
        assert!((f.orientation[0] - 0.75).abs() < 1e-6);

        // both directional bands zero: pinned to the lower range bound
        let f = freq_descriptors(&energies_from(1.0, 0.0, 0.0, 5.0));
        assert_eq!(f.orientation[0], 0.5);
    }

    #[test]
    fn freq_descriptor_extremes() {
        // constant image: every detail band vanishes
        let x = FloatTensor::from_vec(Shape::new(1, 1, 4, 4), vec![0.7; 16]).unwrap();
        let d = descriptors(&x);
        assert_eq!(d.freq.high_freq_ratio[0], 0.0);

        // Nyquist checkerboard: the coarse band vanishes
        let mut v = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                v.push(if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        let x = FloatTensor::from_vec(Shape::new(1, 1, 8, 8), v).unwrap();
        let d = descriptors(&x);
        assert!((d.freq.high_freq_ratio[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn freq_ranges_hold_on_random_inputs() {
        for seed in 0..20 {
            let x = random_tensor(Shape::new(1, 4, 6, 6), seed, -3.0..3.0);
            let d = descriptors(&x);
            for &r in &d.freq.high_freq_ratio {
                assert!((0.0..=1.0 + 1e-6).contains(&r), "r_hf={r}");
            }
            for &s in &d.freq.orientation {
                assert!((0.5 - 1e-6..=1.0 + 1e-6).contains(&s), "s={s}");
            }
        }
    }

    #[test]
    fn orientation_invariant_under_transpose() {
        let x = random_tensor(Shape::new(1, 1, 6, 6), 23, -1.0..1.0);
        let s = x.shape();
        let mut td = vec![0.0f32; s.numel()];
        for i in 0..s.h {
            for j in 0..s.w {
                td[j * s.h + i] = x.get(0, 0, i, j);
            }
        }
        let xt = FloatTensor::from_vec(Shape::new(1, 1, s.w, s.h), td).unwrap();
        let a = descriptors(&x).freq.orientation[0];
        let b = descriptors(&xt).freq.orientation[0];
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn stats_simple_cases() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 2, 2), vec![-0.5; 4]).unwrap();
        let s = stats_descriptors(&x);
        assert_eq!(s.mu[0], -0.5);
        assert_eq!(s.sigma[0], 0.0);
        assert_eq!(s.m_abs[0], 0.5);

        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]).unwrap();
        let s = stats_descriptors(&x);
        assert_eq!(s.mu[0], 0.0);
        assert_eq!(s.sigma[0], 1.0);
        assert_eq!(s.m_abs[0], 1.0);
    }

    #[test]
    fn stats_match_loop_oracle() {
        let x = random_tensor(Shape::new(2, 2, 5, 5), 31, -2.0..2.0);
        let s = stats_descriptors(&x);
        for b in 0..2 {
            for c in 0..2 {
                let mut vals = Vec::new();
                for i in 0..5 {
                    for j in 0..5 {
                        vals.push(x.get(b, c, i, j) as f64);
                    }
                }
                let mu = vals.iter().sum::<f64>() / 25.0;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 25.0;
                let i = b * 2 + c;
                assert!((s.mu[i] as f64 - mu).abs() < 1e-6);
                assert!((s.sigma[i] as f64 - var.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_head_gives_half_gates() {
        let x = random_tensor(Shape::new(2, 3, 6, 6), 3, -1.0..1.0);
        let g = predict_gate(&x, &GateHead::zeros());
        assert!(g.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bias_drives_gate_towards_endpoints() {
        let x = random_tensor(Shape::new(1, 2, 4, 4), 4, -1.0..1.0);
        let hi = predict_gate(&x, &GateHead { weight: [0.0; 5], bias: 10.0 });
        let lo = predict_gate(&x, &GateHead { weight: [0.0; 5], bias: -10.0 });
        for (&h, &l) in hi.values().iter().zip(lo.values()) {
            assert!(h > 0.9999 && h < 1.0, "h={h}");
            assert!(l < 1e-4 && l > 0.0, "l={l}");
        }
    }

    #[test]
    fn high_frequency_channel_gets_larger_gate() {
        // channel 0: Nyquist checkerboard; channel 1: constant
        let mut v = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                v.push(if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        v.extend(std::iter::repeat(0.3).take(64));
        let x = FloatTensor::from_vec(Shape::new(1, 2, 8, 8), v).unwrap();
        let head = GateHead { weight: [0.0, 0.0, 0.0, 4.0, 0.0], bias: 0.0 };
        let g = predict_gate(&x, &head);
        assert!(
            g.get(0, 0) > g.get(0, 1),
            "checkerboard {} vs constant {}",
            g.get(0, 0),
            g.get(0, 1)
        );
        // hand-computed: checkerboard has r_hf ≈ 1, constant has r_hf = 0
        assert!((g.get(0, 0) - (1.0 / (1.0 + (-4.0f64).exp())) as f32).abs() < 1e-4);
        assert_eq!(g.get(0, 1), 0.5);
    }

    #[test]
    fn gate_is_permutation_equivariant() {
        let x = random_tensor(Shape::new(1, 4, 6, 6), 99, -1.0..1.0);
        let head = GateHead { weight: [0.3, -0.2, 0.5, 1.0, -0.7], bias: 0.1 };
        let g = predict_gate(&x, &head);
        let perm = [2usize, 0, 3, 1];
        let s = x.shape();
        let mut pd = vec![0.0f32; s.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            let plane = s.h * s.w;
            pd[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&x.data()[src * plane..(src + 1) * plane]);
        }
        let xp = FloatTensor::from_vec(s, pd).unwrap();
        let gp = predict_gate(&xp, &head);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(gp.get(0, dst), g.get(0, src));
        }
    }

    #[test]
    fn gates_stay_in_open_interval() {
        let x = random_tensor(Shape::new(1, 2, 4, 4), 8, -1.0..1.0);
        let g = predict_gate(&x, &GateHead { weight: [0.0; 5], bias: 1000.0 });
        for &v in g.values() {
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
