//! Synthetic training pairs: procedural clean images overlaid with a
//! product of two sinusoidal gratings, the classic beat-pattern model of
//! screen-capture interference.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One clean/degraded pair, reproducible from its seed.
#[derive(Clone, Debug)]
pub struct MoireSample {
    pub clean: FloatTensor,
    pub degraded: FloatTensor,
    pub seed: u64,
}

/// Default overlay amplitude range.
pub const AMP_RANGE: (f32, f32) = (0.1, 0.4);

/// Generate a `(1, 3, hw, hw)` pair with the default amplitude range.
pub fn synth_moire(seed: u64, hw: usize) -> Result<MoireSample> {
    synth_moire_with(seed, hw, AMP_RANGE.0, AMP_RANGE.1)
}

/// Generate with an explicit amplitude range; `amp_lo == amp_hi == 0`
/// yields `degraded == clean` byte-for-byte.
pub fn synth_moire_with(seed: u64, hw: usize, amp_lo: f32, amp_hi: f32) -> Result<MoireSample> {
    if hw < 32 {
        return Err(Error::domain("synth_moire", format!("hw must be >= 32, got {hw}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, hw, hw);
    let mut clean = FloatTensor::zeros(shape);

    // smooth color gradient background
    let base: Vec<[f32; 3]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ]
        })
        .collect();
    for c in 0..3 {
        let [b0, gx, gy] = base[c];
        for i in 0..hw {
            for j in 0..hw {
                let v = b0 + gx * (j as f32 / hw as f32) + gy * (i as f32 / hw as f32);
                clean.set(0, c, i, j, v);
            }
        }
    }

    // a handful of filled rectangles and discs
    for _ in 0..rng.random_range(2..5usize) {
        let color: [f32; 3] = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        if rng.random_range(0.0..1.0) < 0.5 {
            let x0 = rng.random_range(0..hw);
            let y0 = rng.random_range(0..hw);
            let w = rng.random_range(hw / 8..hw / 2);
            let h = rng.random_range(hw / 8..hw / 2);
            for i in y0..(y0 + h).min(hw) {
                for j in x0..(x0 + w).min(hw) {
                    for c in 0..3 {
                        clean.set(0, c, i, j, color[c]);
                    }
                }
            }
        } else {
            let cx = rng.random_range(0..hw) as f32;
            let cy = rng.random_range(0..hw) as f32;
            let r = rng.random_range(hw as f32 / 10.0..hw as f32 / 4.0);
            for i in 0..hw {
                for j in 0..hw {
                    let d = (j as f32 - cx).powi(2) + (i as f32 - cy).powi(2);
                    if d < r * r {
                        for c in 0..3 {
                            clean.set(0, c, i, j, color[c]);
                        }
                    }
                }
            }
        }
    }

    // gentle low-frequency texture
    let tex_f = rng.random_range(1.0..3.0f32);
    let tex_th = rng.random_range(0.0..std::f32::consts::TAU);
    for c in 0..3 {
        for i in 0..hw {
            for j in 0..hw {
                let p = (j as f32 * tex_th.cos() + i as f32 * tex_th.sin()) / hw as f32;
                let v = clean.get(0, c, i, j)
                    + 0.05 * (std::f32::consts::TAU * tex_f * p).sin();
                clean.set(0, c, i, j, v.clamp(0.0, 1.0));
            }
        }
    }

    // interference: product of two gratings with random frequency vectors
    let amp = if amp_hi > amp_lo { rng.random_range(amp_lo..amp_hi) } else { amp_lo };
    let grating = |rng: &mut ChaCha8Rng| {
        let rho = rng.random_range(4.0..(hw as f32 / 4.0));
        let th = rng.random_range(0.0..std::f32::consts::TAU);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        (rho * th.cos(), rho * th.sin(), phase)
    };
    let (f1x, f1y, p1) = grating(&mut rng);
    let (f2x, f2y, p2) = grating(&mut rng);
    let chroma: [f32; 3] = [
        rng.random_range(0.0..std::f32::consts::TAU),
        rng.random_range(0.0..std::f32::consts::TAU),
        rng.random_range(0.0..std::f32::consts::TAU),
    ];

    let mut degraded = clean.clone();
    if amp != 0.0 {
        for c in 0..3 {
            for i in 0..hw {
                for j in 0..hw {
                    let u = std::f32::consts::TAU * (f1x * j as f32 + f1y * i as f32)
                        / hw as f32
                        + p1
                        + chroma[c];
                    let v = std::f32::consts::TAU * (f2x * j as f32 + f2y * i as f32)
                        / hw as f32
                        + p2;
                    let m = amp * u.sin() * v.sin();
                    let d = (clean.get(0, c, i, j) + m).clamp(0.0, 1.0);
                    degraded.set(0, c, i, j, d);
                }
            }
        }
    }

    Ok(MoireSample { clean, degraded, seed })
}

/// Aligned crop of a clean/degraded pair.
pub fn crop_pair(sample: &MoireSample, top: usize, left: usize, size: usize) -> Result<(FloatTensor, FloatTensor)> {
    let s = sample.clean.shape();
    if top + size > s.h || left + size > s.w {
        return Err(Error::domain("crop_pair", "crop exceeds image bounds"));
    }
    let out_shape = Shape::new(1, s.c, size, size);
    let mut clean = FloatTensor::zeros(out_shape);
    let mut degraded = FloatTensor::zeros(out_shape);
    for c in 0..s.c {
        for i in 0..size {
            for j in 0..size {
                clean.set(0, c, i, j, sample.clean.get(0, c, top + i, left + j));
                degraded.set(0, c, i, j, sample.degraded.get(0, c, top + i, left + j));
            }
        }
    }
    Ok((clean, degraded))
}
