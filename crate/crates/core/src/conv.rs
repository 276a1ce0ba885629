//! XNOR-popcount convolution and the gated binary convolution.
//!
//! The packed kernel gathers each input window into a flat bit buffer
//! (conv padding is logical −1, i.e. a zero bit that still counts toward
//! the window size) and reduces against whole packed filters:
//!
//! ```text
//! dot = n_live − 2 · popcount(window XOR filter)
//! ```
//!
//! which equals the float convolution of the ±1 operands exactly. The
//! gated variant weights the per-input-channel responses by a gate value
//! before the channel sum, so it keeps one integer response map per input
//! channel and combines them in f64 with a fixed channel order.

use crate::error::{Error, Result};
use crate::mabg::GateVector;
use crate::par;
use crate::tensor::{
    binarize_weights, extract_bits, pack_filters, sign_binarize, unpack, write_bits, BitTensor,
    ChannelScales, FloatTensor, Shape, ThresholdVector, compute_scales,
};
use std::borrow::Cow;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config("conv channels must be >= 1".into()));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("kernel size and stride must be >= 1".into()));
        }
        if k > 64 {
            return Err(Error::Config(format!("kernel size {k} exceeds the 64 supported")));
        }
        Ok(ConvSpec { c_in, c_out, k, stride, padding })
    }

    /// Output spatial dims for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = (h + 2 * self.padding).checked_sub(self.k).map(|v| v / self.stride + 1);
        let wo = (w + 2 * self.padding).checked_sub(self.k).map(|v| v / self.stride + 1);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
            _ => Err(Error::dim(
                "ConvSpec::output_hw",
                "output dims >= 1",
                format!("input ({h},{w}) with k={} s={} p={}", self.k, self.stride, self.padding),
            )),
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.k, self.k)
    }
}

/// Shared windowed XNOR reducer. `filters` holds `c_out` packed rows of
/// `n_bits` live bits; the window gathers channels `c0..c0+cn` of `xb`.
fn xnor_windows(
    xb: &BitTensor,
    spec: &ConvSpec,
    c0: usize,
    cn: usize,
    filters: &[u64],
    words_per_filter: usize,
    n_bits: usize,
    parallel: bool,
) -> Result<FloatTensor> {
    let s = xb.shape();
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let (k, stride, padding) = (spec.k, spec.stride, spec.padding);
    let c_out = spec.c_out;
    let w_in = s.w;

    // Row-major (b, i) tasks producing a (c_out, w_out)-shaped slab each,
    // permuted into (b, o, i, j) afterwards.
    let mut slab = vec![0.0f32; s.b * h_out * c_out * w_out];
    par::for_each_chunk(&mut slab, c_out * w_out, parallel, |r, chunk| {
        let b = r / h_out;
        let i = r % h_out;
        let mut window = vec![0u64; words_per_filter];
        for j in 0..w_out {
            window.iter_mut().for_each(|w| *w = 0);
            let x0 = (j * stride) as isize - padding as isize;
            for c in 0..cn {
                let row_base = (b * s.c + c0 + c) * s.h;
                for u in 0..k {
                    let y = (i * stride + u) as isize - padding as isize;
                    if y < 0 || y >= s.h as isize {
                        continue; // padded row: all zero bits (logical −1)
                    }
                    let bits = extract_bits(xb.row_words(row_base + y as usize), w_in, x0, k);
                    if bits != 0 {
                        write_bits(&mut window, (c * k + u) * k, bits, k);
                    }
                }
            }
            for o in 0..c_out {
                let frow = &filters[o * words_per_filter..(o + 1) * words_per_filter];
                let mut xor_pop = 0u32;
                for (wv, fv) in window.iter().zip(frow) {
                    xor_pop += (wv ^ fv).count_ones();
                }
                chunk[o * w_out + j] = (n_bits as i64 - 2 * xor_pop as i64) as f32;
            }
        }
    });

    let mut out = FloatTensor::zeros(Shape::new(s.b, c_out, h_out, w_out));
    let od = out.data_mut();
    for b in 0..s.b {
        for i in 0..h_out {
            let src = &slab[(b * h_out + i) * c_out * w_out..];
            for o in 0..c_out {
                let dst = ((b * c_out + o) * h_out + i) * w_out;
                od[dst..dst + w_out].copy_from_slice(&src[o * w_out..(o + 1) * w_out]);
            }
        }
    }
    Ok(out)
}

fn check_conv_inputs(xb: &BitTensor, wb: &BitTensor, spec: &ConvSpec) -> Result<()> {
    if xb.shape().c != spec.c_in {
        return Err(Error::dim("xnor_conv2d input channels", spec.c_in, xb.shape().c));
    }
    if wb.shape() != spec.weight_shape() {
        return Err(Error::dim(
            "xnor_conv2d weight shape",
            spec.weight_shape(),
            wb.shape(),
        ));
    }
    Ok(())
}

/// Restore the per-filter packing if the caller handed over weights packed
/// along the width axis.
fn as_filter_rows<'a>(wb: &'a BitTensor, spec: &ConvSpec) -> Cow<'a, BitTensor> {
    let flen = spec.c_in * spec.k * spec.k;
    if wb.row_len() == flen {
        Cow::Borrowed(wb)
    } else {
        Cow::Owned(pack_filters(&unpack(wb)).expect("±1 by construction"))
    }
}

/// Multi-channel XNOR-popcount convolution of ±1 operands. The result is
/// integer-valued and equals the naive float convolution exactly.
pub fn xnor_conv2d(xb: &BitTensor, wb: &BitTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    xnor_conv2d_impl(xb, wb, spec, par::parallel_enabled())
}

/// Sequential twin of [`xnor_conv2d`]; bit-identical by construction.
pub fn xnor_conv2d_seq(xb: &BitTensor, wb: &BitTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    xnor_conv2d_impl(xb, wb, spec, false)
}

fn xnor_conv2d_impl(
    xb: &BitTensor,
    wb: &BitTensor,
    spec: &ConvSpec,
    parallel: bool,
) -> Result<FloatTensor> {
    check_conv_inputs(xb, wb, spec)?;
    let wb = as_filter_rows(wb, spec);
    let n_bits = spec.c_in * spec.k * spec.k;
    let wpf = n_bits.div_ceil(64);
    let mut filters = Vec::with_capacity(spec.c_out * wpf);
    for o in 0..spec.c_out {
        filters.extend_from_slice(wb.row_words(o));
    }
    xnor_windows(xb, spec, 0, spec.c_in, &filters, wpf, n_bits, parallel)
}

/// One integer response map per input channel:
/// `stack[c][b, o, i, j] = xb[b, c] ∗ wb[o, c]`.
pub fn per_channel_conv_stack(
    xb: &BitTensor,
    wb: &BitTensor,
    spec: &ConvSpec,
) -> Result<Vec<FloatTensor>> {
    check_conv_inputs(xb, wb, spec)?;
    let wb = as_filter_rows(wb, spec);
    let k2 = spec.k * spec.k;
    let wpf = k2.div_ceil(64);
    let parallel = par::parallel_enabled();
    let maps = par::map_indexed(spec.c_in, parallel, |c| {
        let mut filters = vec![0u64; spec.c_out * wpf];
        for o in 0..spec.c_out {
            // slice channel c out of the flat (c, u, v) filter row
            for q in 0..k2 {
                let chunk = (q / 64).min(wpf - 1);
                let bits = extract_bits(
                    wb.row_words(o),
                    spec.c_in * k2,
                    (c * k2 + q) as isize,
                    1,
                );
                if bits != 0 {
                    filters[o * wpf + chunk] |= 1u64 << (q % 64);
                }
            }
        }
        xnor_windows(xb, spec, c, 1, &filters, wpf, k2, false)
    });
    maps.into_iter().collect()
}

/// Per-input-channel integer responses in `(batch, out_channel, in_channel,
/// plane)` layout, so one `(b, o)` task owns a contiguous slice.
pub(crate) struct StackI16 {
    pub c_out: usize,
    pub c_in: usize,
    pub plane: usize,
    pub data: Vec<i16>,
}

impl StackI16 {
    #[inline]
    pub fn slice(&self, b: usize, o: usize, c: usize) -> &[i16] {
        let base = ((b * self.c_out + o) * self.c_in + c) * self.plane;
        &self.data[base..base + self.plane]
    }
}

pub(crate) struct GatedForward {
    pub out: FloatTensor,
    pub pre_sum: FloatTensor,
    pub stack: Option<StackI16>,
}

/// SWAR per-byte popcount: each byte of the result holds the bit count of
/// the corresponding input byte.
#[inline]
fn popcount_bytes(mut x: u64) -> u64 {
    x -= (x >> 1) & 0x5555_5555_5555_5555;
    x = (x & 0x3333_3333_3333_3333) + ((x >> 2) & 0x3333_3333_3333_3333);
    (x + (x >> 4)) & 0x0f0f_0f0f_0f0f_0f0f
}

/// Fused gated conv: byte windows per packed input row, per-channel
/// XNOR-popcount dots, f64 gate-weighted combine, output scaling — one
/// parallel pass over `(batch, out_channel)` planes. Requires `k <= 8`
/// (window bits fit a byte); callers fall back to the generic stack path
/// for larger kernels.
pub(crate) fn gated_conv_fused(
    xb: &BitTensor,
    wb: &BitTensor,
    spec: &ConvSpec,
    beta: &GateVector,
    scales: &ChannelScales,
    want_stack: bool,
) -> Result<GatedForward> {
    assert!(spec.k <= 8, "fused path requires k <= 8");
    check_conv_inputs(xb, wb, spec)?;
    let wb = as_filter_rows(wb, spec);
    let s = xb.shape();
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let (k, stride, padding) = (spec.k, spec.stride, spec.padding);
    let k2 = (k * k) as i32;
    let hp = s.h + 2 * padding;

    // window bytes: k bits of each padded input row per output column
    let mut wins = vec![0u8; s.b * s.c * hp * w_out];
    for bc in 0..s.b * s.c {
        for y_pad in 0..hp {
            let y = y_pad as isize - padding as isize;
            if y < 0 || y >= s.h as isize {
                continue;
            }
            let row = xb.row_words(bc * s.h + y as usize);
            let dst = (bc * hp + y_pad) * w_out;
            for j in 0..w_out {
                let x0 = (j * stride) as isize - padding as isize;
                wins[dst + j] = extract_bits(row, s.w, x0, k) as u8;
            }
        }
    }

    // filter bytes: k bits per (o, c, u)
    let flen = spec.c_in * k * k;
    let mut fbits = vec![0u8; spec.c_out * spec.c_in * k];
    for o in 0..spec.c_out {
        let row = wb.row_words(o);
        for c in 0..spec.c_in {
            for u in 0..k {
                fbits[(o * spec.c_in + c) * k + u] =
                    extract_bits(row, flen, ((c * k + u) * k) as isize, k) as u8;
            }
        }
    }

    let plane = h_out * w_out;
    // one task per (b, o) producing (pre, out, optional stack rows)
    let tasks = par::map_indexed(s.b * spec.c_out, par::parallel_enabled(), |r| {
        let b = r / spec.c_out;
        let o = r % spec.c_out;
        let mut acc = vec![0.0f64; plane];
        let mut dots = vec![0i16; plane];
        let mut stack_rows = want_stack.then(|| Vec::with_capacity(spec.c_in * plane));
        for c in 0..spec.c_in {
            let g = beta.get(b, c) as f64;
            let fb = &fbits[(o * spec.c_in + c) * k..(o * spec.c_in + c) * k + k];
            let wbase = ((b * s.c + c) * hp) * w_out;
            for i in 0..h_out {
                let drow = &mut dots[i * w_out..(i + 1) * w_out];
                // eight window positions per u64; per-byte counts stay
                // below 256 (at most k² live bits per position)
                let chunks = w_out / 8;
                for q in 0..chunks {
                    let mut counts = 0u64;
                    for (u, &fu) in fb.iter().enumerate() {
                        let rowu = wbase + (i * stride + u) * w_out + 8 * q;
                        let wv = u64::from_le_bytes(wins[rowu..rowu + 8].try_into().unwrap());
                        counts += popcount_bytes(wv ^ (fu as u64 * 0x0101_0101_0101_0101));
                    }
                    let bytes = counts.to_le_bytes();
                    for (t, &cnt) in bytes.iter().enumerate() {
                        drow[8 * q + t] = (k2 - 2 * cnt as i32) as i16;
                    }
                }
                for j in 8 * chunks..w_out {
                    let mut cnt = 0u32;
                    for (u, &fu) in fb.iter().enumerate() {
                        let rowu = wbase + (i * stride + u) * w_out;
                        cnt += (wins[rowu + j] ^ fu).count_ones();
                    }
                    drow[j] = (k2 - 2 * cnt as i32) as i16;
                }
            }
            for (a, &d) in acc.iter_mut().zip(dots.iter()) {
                *a += g * d as f64;
            }
            if let Some(rows) = stack_rows.as_mut() {
                rows.extend_from_slice(&dots);
            }
        }
        let scale = scales.0[o] as f64;
        let mut pre_row = Vec::with_capacity(plane);
        let mut out_row = Vec::with_capacity(plane);
        for &a in &acc {
            pre_row.push(a as f32);
            out_row.push((a * scale) as f32);
        }
        (pre_row, out_row, stack_rows)
    });

    let mut pre = FloatTensor::zeros(Shape::new(s.b, spec.c_out, h_out, w_out));
    let mut out = FloatTensor::zeros(pre.shape());
    let mut stack = want_stack.then(|| StackI16 {
        c_out: spec.c_out,
        c_in: spec.c_in,
        plane,
        data: Vec::with_capacity(s.b * spec.c_out * spec.c_in * plane),
    });
    for (bo, (pre_row, out_row, stack_rows)) in tasks.into_iter().enumerate() {
        let base = bo * plane;
        pre.data_mut()[base..base + plane].copy_from_slice(&pre_row);
        out.data_mut()[base..base + plane].copy_from_slice(&out_row);
        if let (Some(st), Some(rows)) = (stack.as_mut(), stack_rows) {
            st.data.extend_from_slice(&rows);
        }
    }
    Ok(GatedForward { out, pre_sum: pre, stack })
}

/// Float-operand counterpart of [`per_channel_conv_stack`] used when the
/// binarization is replaced by its smooth surrogate. Padding contributes
/// the constant `pad` value.
pub fn per_channel_conv_stack_float(
    x_op: &FloatTensor,
    w_op: &FloatTensor,
    spec: &ConvSpec,
    pad: f32,
) -> Result<Vec<FloatTensor>> {
    let s = x_op.shape();
    if s.c != spec.c_in {
        return Err(Error::dim("per_channel_conv_stack_float", spec.c_in, s.c));
    }
    if w_op.shape() != spec.weight_shape() {
        return Err(Error::dim(
            "per_channel_conv_stack_float weights",
            spec.weight_shape(),
            w_op.shape(),
        ));
    }
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let mut stack = Vec::with_capacity(spec.c_in);
    for c in 0..spec.c_in {
        let mut m = FloatTensor::zeros(Shape::new(s.b, spec.c_out, h_out, w_out));
        let md = m.data_mut();
        for b in 0..s.b {
            for o in 0..spec.c_out {
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut acc = 0.0f64;
                        for u in 0..spec.k {
                            for v in 0..spec.k {
                                let y = (i * spec.stride + u) as isize - spec.padding as isize;
                                let x = (j * spec.stride + v) as isize - spec.padding as isize;
                                let xv = if y >= 0 && y < s.h as isize && x >= 0 && x < s.w as isize
                                {
                                    x_op.get(b, c, y as usize, x as usize)
                                } else {
                                    pad
                                };
                                acc += xv as f64 * w_op.get(o, c, u, v) as f64;
                            }
                        }
                        md[((b * spec.c_out + o) * h_out + i) * w_out + j] = acc as f32;
                    }
                }
            }
        }
        stack.push(m);
    }
    Ok(stack)
}

/// `out = (Σ_c beta[b,c] · stack[c]) · scale[o]`, accumulated in f64 with
/// ascending channel order. Returns the pre-scale sum alongside the output.
pub fn combine_gated(
    stack: &[FloatTensor],
    beta: &GateVector,
    scales: &ChannelScales,
) -> (FloatTensor, FloatTensor) {
    let s = stack[0].shape();
    let plane = s.h * s.w;
    let mut pre = FloatTensor::zeros(s);
    let mut out = FloatTensor::zeros(s);
    // each (b, o) plane is independent; channel order inside stays fixed
    let mut joint = vec![0.0f32; 2 * s.b * s.c * plane];
    par::for_each_chunk(&mut joint, 2 * plane, par::parallel_enabled(), |r, chunk| {
        let b = r / s.c;
        let o = r % s.c;
        let base = (b * s.c + o) * plane;
        let mut acc = vec![0.0f64; plane];
        for (c, map) in stack.iter().enumerate() {
            let g = beta.get(b, c) as f64;
            let md = &map.data()[base..base + plane];
            for (a, &m) in acc.iter_mut().zip(md) {
                *a += g * m as f64;
            }
        }
        let scale = scales.0[o] as f64;
        let (pre_chunk, out_chunk) = chunk.split_at_mut(plane);
        for (i, &a) in acc.iter().enumerate() {
            pre_chunk[i] = a as f32;
            out_chunk[i] = (a * scale) as f32;
        }
    });
    for bo in 0..s.b * s.c {
        let base = bo * plane;
        pre.data_mut()[base..base + plane]
            .copy_from_slice(&joint[2 * base..2 * base + plane]);
        out.data_mut()[base..base + plane]
            .copy_from_slice(&joint[2 * base + plane..2 * base + 2 * plane]);
    }
    (out, pre)
}

fn check_gate(beta: &GateVector, batch: usize, c_in: usize) -> Result<()> {
    if beta.batch() != batch || beta.channels() != c_in {
        return Err(Error::dim(
            "gated conv gate",
            format!("{batch}x{c_in}"),
            format!("{}x{}", beta.batch(), beta.channels()),
        ));
    }
    // The gate codomain is (0,1); 0 and 1 are admitted so indicator and
    // identity gates stay expressible.
    for &v in beta.values() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain("gated conv gate", format!("gate value {v} outside [0,1]")));
        }
    }
    Ok(())
}

/// Gated binary convolution: binarize input and weights, compute the
/// per-input-channel binary responses, weight them by the gate before the
/// channel sum, and scale each output channel by its mean-|w| factor.
///
/// Dispatches to the fully packed kernel when the gate is uniform within
/// every sample; the two paths agree exactly in that case.
pub fn gated_binary_conv(
    xf: &FloatTensor,
    wf: &FloatTensor,
    t: &ThresholdVector,
    beta: &GateVector,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    check_gate(beta, xf.shape().b, spec.c_in)?;
    match beta.uniform_per_sample() {
        Some(_) => gated_binary_conv_packed(xf, wf, t, beta, spec),
        None => gated_binary_conv_literal(xf, wf, t, beta, spec),
    }
}

/// Reference path: per-channel binary responses combined under the gate.
pub fn gated_binary_conv_literal(
    xf: &FloatTensor,
    wf: &FloatTensor,
    t: &ThresholdVector,
    beta: &GateVector,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    check_gate(beta, xf.shape().b, spec.c_in)?;
    let xb = sign_binarize(xf, t)?;
    let wb = binarize_weights(wf);
    let scales = compute_scales(wf);
    if spec.k <= 8 {
        return Ok(gated_conv_fused(&xb, &wb, spec, beta, &scales, false)?.out);
    }
    let stack = per_channel_conv_stack(&xb, &wb, spec)?;
    Ok(combine_gated(&stack, beta, &scales).0)
}

/// Packed fast path; only valid when the gate is uniform per sample.
pub fn gated_binary_conv_packed(
    xf: &FloatTensor,
    wf: &FloatTensor,
    t: &ThresholdVector,
    beta: &GateVector,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    check_gate(beta, xf.shape().b, spec.c_in)?;
    let per_sample = beta.uniform_per_sample().ok_or_else(|| {
        Error::domain("gated_binary_conv_packed", "gate is not uniform per sample")
    })?;
    let xb = sign_binarize(xf, t)?;
    let wb = binarize_weights(wf);
    let scales = compute_scales(wf);
    let total = xnor_conv2d(&xb, &wb, spec)?;
    let s = total.shape();
    let mut out = FloatTensor::zeros(s);
    let plane = s.h * s.w;
    for b in 0..s.b {
        let g = per_sample[b] as f64;
        for o in 0..s.c {
            let a = scales.0[o] as f64;
            let base = (b * s.c + o) * plane;
            for p in 0..plane {
                let t_int = total.data()[base + p] as f64;
                out.data_mut()[base + p] = ((g * t_int) * a) as f32;
            }
        }
    }
    Ok(out)
}

/// Per-channel parameters of the shifted parametric activation that
/// follows every binary convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RpreluParams {
    pub gamma: Vec<f32>,
    pub zeta: Vec<f32>,
    pub slope: Vec<f32>,
}

impl RpreluParams {
    pub fn identity(channels: usize) -> Self {
        RpreluParams {
            gamma: vec![0.0; channels],
            zeta: vec![0.0; channels],
            slope: vec![1.0; channels],
        }
    }

    pub fn with_slope(channels: usize, slope: f32) -> Self {
        RpreluParams {
            gamma: vec![0.0; channels],
            zeta: vec![0.0; channels],
            slope: vec![slope; channels],
        }
    }
}

/// `y = (x − γ_c) + ζ_c` above the knee, `slope_c (x − γ_c) + ζ_c` below;
/// both branches meet at `x = γ_c`.
pub fn rprelu(x: &FloatTensor, p: &RpreluParams) -> Result<FloatTensor> {
    let s = x.shape();
    if p.gamma.len() != s.c || p.zeta.len() != s.c || p.slope.len() != s.c {
        return Err(Error::dim("rprelu", s.c, p.gamma.len()));
    }
    let mut out = FloatTensor::zeros(s);
    let plane = s.h * s.w;
    for b in 0..s.b {
        for c in 0..s.c {
            let (g, z, m) = (p.gamma[c], p.zeta[c], p.slope[c]);
            let base = (b * s.c + c) * plane;
            for idx in base..base + plane {
                let v = x.data()[idx] - g;
                out.data_mut()[idx] = if x.data()[idx] > g { v + z } else { m * v + z };
            }
        }
    }
    Ok(out)
}

/// Plain full-precision convolution (zero padding, no bias); used for the
/// first and last layers that stay out of the binary regime.
pub fn conv2d_fp(x: &FloatTensor, w: &FloatTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    let s = x.shape();
    if s.c != spec.c_in {
        return Err(Error::dim("conv2d_fp input channels", spec.c_in, s.c));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::dim("conv2d_fp weight shape", spec.weight_shape(), w.shape()));
    }
    let (h_out, w_out) = spec.output_hw(s.h, s.w)?;
    let mut out = FloatTensor::zeros(Shape::new(s.b, spec.c_out, h_out, w_out));
    let plane = h_out * w_out;
    let (k, stride, padding) = (spec.k, spec.stride, spec.padding);
    // zero-padded copy keeps the window loops branch-free
    let (hp, wp) = (s.h + 2 * padding, s.w + 2 * padding);
    let mut xp = vec![0.0f32; s.b * s.c * hp * wp];
    for bc in 0..s.b * s.c {
        for i in 0..s.h {
            let src = bc * s.h * s.w + i * s.w;
            let dst = bc * hp * wp + (i + padding) * wp + padding;
            xp[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
        }
    }
    let wd = w.data();
    par::for_each_chunk(out.data_mut(), plane, par::parallel_enabled(), |r, chunk| {
        let b = r / spec.c_out;
        let o = r % spec.c_out;
        let mut acc = vec![0.0f64; w_out];
        for i in 0..h_out {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for c in 0..spec.c_in {
                let wbase = ((o * spec.c_in + c) * k) * k;
                let xbase = (b * s.c + c) * hp;
                for u in 0..k {
                    let xrow = (xbase + i * stride + u) * wp;
                    for v in 0..k {
                        let wv = wd[wbase + u * k + v] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        if stride == 1 {
                            let xs_row = &xp[xrow + v..xrow + v + w_out];
                            for (a, &xv) in acc.iter_mut().zip(xs_row) {
                                *a += wv * xv as f64;
                            }
                        } else {
                            for (j, a) in acc.iter_mut().enumerate() {
                                *a += wv * xp[xrow + j * stride + v] as f64;
                            }
                        }
                    }
                }
            }
            for (dst, &a) in chunk[i * w_out..(i + 1) * w_out].iter_mut().zip(&acc) {
                *dst = a as f32;
            }
        }
    });
    Ok(out)
}

/// Nearest-neighbour 2× spatial upsample.
pub fn upsample_nearest2x(x: &FloatTensor) -> FloatTensor {
    let s = x.shape();
    let mut out = FloatTensor::zeros(Shape::new(s.b, s.c, s.h * 2, s.w * 2));
    for b in 0..s.b {
        for c in 0..s.c {
            for i in 0..s.h {
                let src = x.row(b, c, i);
                for di in 0..2 {
                    let dst = out.shape().idx(b, c, 2 * i + di, 0);
                    let drow = &mut out.data_mut()[dst..dst + 2 * s.w];
                    for (j, &v) in src.iter().enumerate() {
                        drow[2 * j] = v;
                        drow[2 * j + 1] = v;
                    }
                }
            }
        }
    }
    out
}
