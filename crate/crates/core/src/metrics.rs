//! PSNR and a fixed-window SSIM.

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

/// Peak signal-to-noise ratio in dB; identical inputs return +∞.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("psnr", a.len(), b.len()));
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr_tensor(a: &FloatTensor, b: &FloatTensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("psnr", a.shape(), b.shape()));
    }
    psnr(a.data(), b.data(), peak)
}

/// Mean structural similarity over non-overlapping square windows with
/// uniform weighting, averaged across channels. Constants follow the
/// standard `C1 = (0.01 L)²`, `C2 = (0.03 L)²`. Values reported by this
/// variant are comparable only against the same variant.
pub fn ssim_tensor(a: &FloatTensor, b: &FloatTensor, window: usize, data_range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("ssim", a.shape(), b.shape()));
    }
    let s = a.shape();
    if window == 0 || s.h < window || s.w < window {
        return Err(Error::domain(
            "ssim",
            format!("dims ({},{}) smaller than window {window}", s.h, s.w),
        ));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (window * window) as f64;
    let (wy, wx) = (s.h / window, s.w / window);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for bi in 0..s.b {
        for c in 0..s.c {
            for gy in 0..wy {
                for gx in 0..wx {
                    let (mut ma, mut mb) = (0.0f64, 0.0f64);
                    for i in 0..window {
                        for j in 0..window {
                            ma += a.get(bi, c, gy * window + i, gx * window + j) as f64;
                            mb += b.get(bi, c, gy * window + i, gx * window + j) as f64;
                        }
                    }
                    ma /= n;
                    mb /= n;
                    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                    for i in 0..window {
                        for j in 0..window {
                            let da = a.get(bi, c, gy * window + i, gx * window + j) as f64 - ma;
                            let db = b.get(bi, c, gy * window + i, gx * window + j) as f64 - mb;
                            va += da * da;
                            vb += db * db;
                            cov += da * db;
                        }
                    }
                    va /= n;
                    vb /= n;
                    cov /= n;
                    let v = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    total += v;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}
