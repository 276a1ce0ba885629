//! Straightforward reference kernels used as the second route in every
//! equivalence check (and as the "naive float path" in benchmarks). These
//! never touch the bit-packed code paths.

use crate::conv::ConvSpec;
use crate::error::Result;
use crate::mabg::GateVector;
use crate::par;
use crate::tensor::{FloatTensor, Shape, ThresholdVector};

/// Naive float convolution of ±1 operands with −1 padding, f64 window
/// accumulation. Parallelizes over (batch, output channel) rows like the
/// packed kernel so benchmark comparisons measure the packing, not the
/// threading.
pub fn conv2d_pm1(x: &FloatTensor, w: &FloatTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    let s = x.shape();
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let mut out = FloatTensor::zeros(Shape::new(s.b, spec.c_out, h_out, w_out));
    let plane = h_out * w_out;
    let (k, stride, padding) = (spec.k, spec.stride, spec.padding);
    let xd = x.data();
    let wd = w.data();
    par::for_each_chunk(out.data_mut(), plane, par::parallel_enabled(), |r, chunk| {
        let b = r / spec.c_out;
        let o = r % spec.c_out;
        for i in 0..h_out {
            for j in 0..w_out {
                let mut acc = 0.0f64;
                for c in 0..spec.c_in {
                    let wbase = ((o * spec.c_in + c) * k) * k;
                    for u in 0..k {
                        let y = (i * stride + u) as isize - padding as isize;
                        for v in 0..k {
                            let xx = (j * stride + v) as isize - padding as isize;
                            let xv = if y >= 0 && y < s.h as isize && xx >= 0 && xx < s.w as isize
                            {
                                xd[((b * s.c + c) * s.h + y as usize) * s.w + xx as usize]
                            } else {
                                -1.0
                            };
                            acc += xv as f64 * wd[wbase + u * k + v] as f64;
                        }
                    }
                }
                chunk[i * w_out + j] = acc as f32;
            }
        }
    });
    Ok(out)
}

/// f64 per-channel oracle for the gated binary convolution: scalar sign
/// binarization, per-channel float convolution, gate-weighted channel sum,
/// mean-|w| output scaling.
pub fn gated_conv_oracle(
    xf: &FloatTensor,
    wf: &FloatTensor,
    t: &ThresholdVector,
    beta: &GateVector,
    spec: &ConvSpec,
) -> Result<Vec<f64>> {
    let s = xf.shape();
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let sign = |v: f64| if v >= 0.0 { 1.0f64 } else { -1.0 };
    let filter = spec.c_in * spec.k * spec.k;
    let mut alpha = vec![0.0f64; spec.c_out];
    for o in 0..spec.c_out {
        let mut acc = 0.0f64;
        for &v in &wf.data()[o * filter..(o + 1) * filter] {
            acc += v.abs() as f64;
        }
        alpha[o] = acc / filter as f64;
    }
    let mut out = vec![0.0f64; s.b * spec.c_out * h_out * w_out];
    for b in 0..s.b {
        for o in 0..spec.c_out {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut sum = 0.0f64;
                    for c in 0..spec.c_in {
                        let mut s_c = 0.0f64;
                        for u in 0..spec.k {
                            for v in 0..spec.k {
                                let y = (i * spec.stride + u) as isize - spec.padding as isize;
                                let xx = (j * spec.stride + v) as isize - spec.padding as isize;
                                let xv = if y >= 0
                                    && y < s.h as isize
                                    && xx >= 0
                                    && xx < s.w as isize
                                {
                                    sign(xf.get(b, c, y as usize, xx as usize) as f64 + t.0[c] as f64)
                                } else {
                                    -1.0
                                };
                                s_c += xv * sign(wf.get(o, c, u, v) as f64);
                            }
                        }
                        sum += beta.get(b, c) as f64 * s_c;
                    }
                    out[((b * spec.c_out + o) * h_out + i) * w_out + j] = sum * alpha[o];
                }
            }
        }
    }
    Ok(out)
}
