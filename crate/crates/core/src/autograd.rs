//! Reverse-mode gradients for exactly the op set of this crate.
//!
//! The forward pass runs in one of two modes. `Deploy` is the real binary
//! network: activations and weights pass through sign, and the backward
//! rules are the straight-through surrogates (tanh for activations,
//! clipped identity for weights). `Surrogate` replaces the sign functions
//! by those surrogates *in the forward as well*, which makes the network a
//! smooth function of its parameters; the same backward code then computes
//! its true gradient, which is what the finite-difference harness checks.
//!
//! Gate descriptors are treated as non-differentiable conditioning:
//! gradients reach the shared gate head but do not flow through the
//! wavelet/statistics pipeline back into the features.

use crate::conv::{
    conv2d_fp, gated_conv_fused, per_channel_conv_stack, per_channel_conv_stack_float, rprelu,
    upsample_nearest2x, combine_gated, ConvSpec, StackI16,
};
use crate::error::{Error, Result};
use crate::mabg::{descriptors, gate_from_descriptors, Descriptors, GateVector};
use crate::net::{BlockConfig, BlockParams, Layer, Network, ShortcutKind};
use crate::par;
use crate::sgra::{sgra_forward, InterleavePerm, SgraParams};
use crate::tensor::{
    binarize_weights, compute_scales, sign_binarize, unpack, ChannelScales, FloatTensor, Shape,
    ThresholdVector,
};
use std::collections::BTreeMap;

/// Forward semantics: deployed binary network vs its smooth stand-in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinMode {
    Deploy,
    Surrogate,
}

/// Named gradient tensors, accumulated flat. BTreeMap keeps iteration
/// order deterministic.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, values: Vec<f32>) {
        match self.map.get_mut(name) {
            Some(existing) => {
                debug_assert_eq!(existing.len(), values.len(), "{name}");
                for (a, b) in existing.iter_mut().zip(values) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), values);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f32>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn add_tensors(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("tensor add", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(out)
}

/// Per-input-channel conv responses retained for the backward pass.
pub(crate) enum StackCache {
    /// Integer responses from the packed kernel (deploy mode).
    Int(StackI16),
    /// Float responses from the surrogate operands.
    Float(Vec<FloatTensor>),
}

/// Everything the backward pass needs from one block forward.
pub struct BlockCache {
    x: FloatTensor,
    /// ±1 values (Deploy) or tanh surrogate values (Surrogate).
    x_op: FloatTensor,
    scales: ChannelScales,
    beta: GateVector,
    feats: Option<Descriptors>,
    stack: StackCache,
    /// Gate-weighted channel sum before output scaling.
    pre_sum: FloatTensor,
    /// Scaled pre-activation (input of the activation).
    pre_act: FloatTensor,
}

pub enum LayerCache {
    ConvFp { x: FloatTensor },
    Block(Box<BlockCache>),
    Upsample { in_shape: Shape },
    Skip,
}

pub struct ForwardCaches {
    pub mode: BinMode,
    layers: Vec<LayerCache>,
}

fn surrogate_activation(x: &FloatTensor, t: &ThresholdVector, slope: f32) -> FloatTensor {
    let s = x.shape();
    let mut out = FloatTensor::zeros(s);
    let plane = s.h * s.w;
    for b in 0..s.b {
        for c in 0..s.c {
            let tc = t.0[c];
            let base = (b * s.c + c) * plane;
            for p in base..base + plane {
                out.data_mut()[p] = (slope * (x.data()[p] + tc)).tanh();
            }
        }
    }
    out
}

/// One block forward with cache. Shared by training, inference, and the
/// gradient checker.
pub fn block_forward_cached(
    x: &FloatTensor,
    cfg: &BlockConfig,
    params: &BlockParams,
    mode: BinMode,
) -> Result<(FloatTensor, BlockCache)> {
    let feats = cfg.use_mabg.then(|| descriptors(x));
    let beta = match (&feats, &params.gate_head) {
        (Some(f), Some(h)) => gate_from_descriptors(f, h),
        _ => GateVector::uniform(x.shape().b, cfg.conv.c_in, 1.0),
    };
    let scales = compute_scales(&params.weight);
    let (x_op, stack, pre_act, pre_sum) = match mode {
        BinMode::Deploy => {
            let xb = sign_binarize(x, &params.threshold)?;
            let wb = binarize_weights(&params.weight);
            if cfg.conv.k <= 8 {
                let fused = gated_conv_fused(&xb, &wb, &cfg.conv, &beta, &scales, true)?;
                (
                    unpack(&xb),
                    StackCache::Int(fused.stack.expect("stack requested")),
                    fused.out,
                    fused.pre_sum,
                )
            } else {
                let stack = per_channel_conv_stack(&xb, &wb, &cfg.conv)?;
                let (out, pre) = combine_gated(&stack, &beta, &scales);
                (unpack(&xb), StackCache::Float(stack), out, pre)
            }
        }
        BinMode::Surrogate => {
            let x_op = surrogate_activation(x, &params.threshold, params.act_slope);
            let w_op = params.weight.map(|v| v.clamp(-1.0, 1.0));
            let stack = per_channel_conv_stack_float(&x_op, &w_op, &cfg.conv, -1.0)?;
            let (out, pre) = combine_gated(&stack, &beta, &scales);
            (x_op, StackCache::Float(stack), out, pre)
        }
    };
    let main = rprelu(&pre_act, &params.rprelu)?;
    let shortcut = match cfg.shortcut {
        ShortcutKind::Identity => {
            if x.shape() != main.shape() {
                return Err(Error::dim("identity shortcut", main.shape(), x.shape()));
            }
            x.clone()
        }
        ShortcutKind::Adapter => {
            let sgra = params
                .sgra
                .as_ref()
                .ok_or_else(|| Error::Config("adapter shortcut without parameters".into()))?;
            sgra_forward(x, sgra, main.shape())?
        }
        ShortcutKind::None => FloatTensor::zeros(main.shape()),
    };
    let out = add_tensors(&main, &shortcut)?;
    Ok((
        out,
        BlockCache {
            x: x.clone(),
            x_op,
            scales,
            beta,
            feats,
            stack,
            pre_sum,
            pre_act,
        },
    ))
}

/// Deployed block forward (no cache retained).
pub fn block_forward(x: &FloatTensor, cfg: &BlockConfig, params: &BlockParams) -> Result<FloatTensor> {
    block_forward_cached(x, cfg, params, BinMode::Deploy).map(|(out, _)| out)
}

/// Forward pass retaining per-layer caches for a subsequent backward.
pub fn forward_train(net: &Network, x: &FloatTensor, mode: BinMode) -> Result<(FloatTensor, ForwardCaches)> {
    if x.shape().c != net.cfg.in_channels {
        return Err(Error::dim("network input channels", net.cfg.in_channels, x.shape().c));
    }
    // only outputs referenced by a later skip need to stay alive
    let mut skip_sources = vec![false; net.nodes.len()];
    for node in &net.nodes {
        if let Layer::SkipAdd { from } = node.layer {
            skip_sources[from] = true;
        }
    }
    let mut outs: Vec<Option<FloatTensor>> = (0..net.nodes.len()).map(|_| None).collect();
    let mut layers = Vec::with_capacity(net.nodes.len());
    let mut cur = x.clone();
    for (idx, node) in net.nodes.iter().enumerate() {
        match &node.layer {
            Layer::ConvFp { spec, weight } => {
                let y = conv2d_fp(&cur, weight, spec)?;
                layers.push(LayerCache::ConvFp { x: cur });
                cur = y;
            }
            Layer::Block { cfg, params } => {
                let (y, cache) = block_forward_cached(&cur, cfg, params, mode)?;
                layers.push(LayerCache::Block(Box::new(cache)));
                cur = y;
            }
            Layer::Upsample2x => {
                layers.push(LayerCache::Upsample { in_shape: cur.shape() });
                cur = upsample_nearest2x(&cur);
            }
            Layer::SkipAdd { from } => {
                let src = outs[*from]
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("skip source {from} not recorded")))?;
                cur = add_tensors(&cur, src)?;
                layers.push(LayerCache::Skip);
            }
        }
        if skip_sources[idx] {
            outs[idx] = Some(cur.clone());
        }
    }
    if net.cfg.global_residual {
        cur = add_tensors(&cur, x)?;
    }
    Ok((cur, ForwardCaches { mode, layers }))
}

/// Inference forward (deployed semantics, caches discarded).
pub fn forward(net: &Network, x: &FloatTensor) -> Result<FloatTensor> {
    forward_train(net, x, BinMode::Deploy).map(|(out, _)| out)
}

/// Activation STE rule: the backward of `tanh(slope · (x + t))`.
/// Returns `(grad_x, grad_t, grad_slope)`.
pub fn ste_act_backward(
    grad_out: &FloatTensor,
    x: &FloatTensor,
    t: &ThresholdVector,
    slope: f32,
) -> Result<(FloatTensor, Vec<f32>, f32)> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::dim("ste_act_backward", s, grad_out.shape()));
    }
    if t.len() != s.c {
        return Err(Error::dim("ste_act_backward thresholds", s.c, t.len()));
    }
    let mut grad_x = FloatTensor::zeros(s);
    let mut grad_t = vec![0.0f32; s.c];
    let mut grad_slope = 0.0f64;
    let plane = s.h * s.w;
    for b in 0..s.b {
        for c in 0..s.c {
            let tc = t.0[c] as f64;
            let mut tsum = 0.0f64;
            let base = (b * s.c + c) * plane;
            for p in base..base + plane {
                let u = x.data()[p] as f64 + tc;
                let sech2 = 1.0 - (slope as f64 * u).tanh().powi(2);
                let g = grad_out.data()[p] as f64;
                grad_x.data_mut()[p] = (g * slope as f64 * sech2) as f32;
                tsum += g * slope as f64 * sech2;
                grad_slope += g * u * sech2;
            }
            grad_t[c] += tsum as f32;
        }
    }
    Ok((grad_x, grad_t, grad_slope as f32))
}

/// Weight STE rule: pass the gradient where `|w| <= 1`, zero elsewhere
/// (the derivative of the hard clip).
pub fn ste_weight_backward(grad_out_w: &FloatTensor, w_latent: &FloatTensor) -> Result<FloatTensor> {
    if grad_out_w.shape() != w_latent.shape() {
        return Err(Error::dim("ste_weight_backward", w_latent.shape(), grad_out_w.shape()));
    }
    let mut out = grad_out_w.clone();
    for (g, &w) in out.data_mut().iter_mut().zip(w_latent.data()) {
        if w.abs() > 1.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Four-lane f32 dot product; the fixed summation tree keeps results
/// deterministic while letting the lanes run independently.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        lanes[0] += xa[0] * xb[0];
        lanes[1] += xa[1] * xb[1];
        lanes[2] += xa[2] * xb[2];
        lanes[3] += xa[3] * xb[3];
    }
    let mut rem = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        rem += x * y;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + rem
}

/// Materialize the conv padding: `(b, c, h + 2p, w + 2p)` filled with the
/// pad value on the border. Lets every kernel below run branch-free.
fn pad_tensor(x: &FloatTensor, padding: usize, pad: f32) -> (Vec<f32>, usize, usize) {
    let s = x.shape();
    let (hp, wp) = (s.h + 2 * padding, s.w + 2 * padding);
    if padding == 0 {
        return (x.data().to_vec(), hp, wp);
    }
    let mut out = vec![pad; s.b * s.c * hp * wp];
    for bc in 0..s.b * s.c {
        for i in 0..s.h {
            let src = bc * s.h * s.w + i * s.w;
            let dst = bc * hp * wp + (i + padding) * wp + padding;
            out[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
        }
    }
    (out, hp, wp)
}

/// Gradient wrt the conv input. `beta` weights each input channel's
/// contribution (per sample) when present.
fn conv_grad_x(
    w_op: &FloatTensor,
    g: &FloatTensor,
    spec: &ConvSpec,
    in_shape: Shape,
    beta: Option<&GateVector>,
) -> FloatTensor {
    let gs = g.shape();
    let mut out = FloatTensor::zeros(in_shape);
    let plane = in_shape.h * in_shape.w;
    let (k, stride, padding) = (spec.k, spec.stride, spec.padding);
    let (hp, wp) = (in_shape.h + 2 * padding, in_shape.w + 2 * padding);
    let gd = g.data();
    let wd = w_op.data();
    par::for_each_chunk(out.data_mut(), plane, par::parallel_enabled(), |r, chunk| {
        let b = r / in_shape.c;
        let c = r % in_shape.c;
        // scatter into the padded plane, then crop the interior
        let mut buf = vec![0.0f32; hp * wp];
        for o in 0..spec.c_out {
            let gbase = (b * gs.c + o) * gs.h;
            let wbase = (o * spec.c_in + c) * k * k;
            for i in 0..gs.h {
                let grow = &gd[(gbase + i) * gs.w..(gbase + i) * gs.w + gs.w];
                for u in 0..k {
                    let row = (i * stride + u) * wp;
                    let wrow = &wd[wbase + u * k..wbase + u * k + k];
                    if stride == 1 {
                        // whole-row axpy per tap
                        for (v, &w) in wrow.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let dst = &mut buf[row + v..row + v + gs.w];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += w * gv;
                            }
                        }
                    } else {
                        for (j, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let dst = &mut buf[row + j * stride..row + j * stride + k];
                            for (d, &w) in dst.iter_mut().zip(wrow) {
                                *d += gv * w;
                            }
                        }
                    }
                }
            }
        }
        let scale = beta.map_or(1.0f32, |bt| bt.get(b, c));
        for i in 0..in_shape.h {
            let src = (i + padding) * wp + padding;
            for j in 0..in_shape.w {
                chunk[i * in_shape.w + j] = buf[src + j] * scale;
            }
        }
    });
    out
}

/// Gradient wrt the conv weights. Out-of-range input positions contribute
/// the constant `pad` value (−1 for binary convs, 0 for full-precision).
fn conv_grad_w(
    x_op: &FloatTensor,
    g: &FloatTensor,
    spec: &ConvSpec,
    pad: f32,
    beta: Option<&GateVector>,
) -> FloatTensor {
    let xs = x_op.shape();
    let gs = g.shape();
    let mut out = FloatTensor::zeros(spec.weight_shape());
    let k = spec.k;
    let k2 = k * k;
    let (xp, _hp, wp) = pad_tensor(x_op, spec.padding, pad);
    let hp = xs.h + 2 * spec.padding;
    let gd = g.data();
    par::for_each_chunk(out.data_mut(), k2, par::parallel_enabled(), |r, chunk| {
        let o = r / spec.c_in;
        let c = r % spec.c_in;
        for u in 0..k {
            for v in 0..k {
                let mut acc = 0.0f64;
                for b in 0..xs.b {
                    let mut sub = 0.0f64;
                    let gbase = (b * gs.c + o) * gs.h;
                    let xbase = (b * xs.c + c) * hp;
                    for i in 0..gs.h {
                        let grow = &gd[(gbase + i) * gs.w..(gbase + i) * gs.w + gs.w];
                        let xrow = (xbase + i * spec.stride + u) * wp + v;
                        // f32 row dot (short), f64 across rows
                        let row_dot = if spec.stride == 1 {
                            dot_f32(grow, &xp[xrow..xrow + gs.w])
                        } else {
                            let mut acc = 0.0f32;
                            for (j, &gv) in grow.iter().enumerate() {
                                acc += gv * xp[xrow + j * spec.stride];
                            }
                            acc
                        };
                        sub += row_dot as f64;
                    }
                    let bw = beta.map_or(1.0f64, |bt| bt.get(b, c) as f64);
                    acc += bw * sub;
                }
                chunk[u * k + v] = acc as f32;
            }
        }
    });
    out
}

fn rprelu_backward(
    g: &FloatTensor,
    pre_act: &FloatTensor,
    p: &crate::conv::RpreluParams,
) -> (FloatTensor, Vec<f32>, Vec<f32>, Vec<f32>) {
    let s = pre_act.shape();
    let mut gx = FloatTensor::zeros(s);
    let mut g_gamma = vec![0.0f32; s.c];
    let mut g_zeta = vec![0.0f32; s.c];
    let mut g_slope = vec![0.0f32; s.c];
    let plane = s.h * s.w;
    for b in 0..s.b {
        for c in 0..s.c {
            let (gamma, slope) = (p.gamma[c], p.slope[c]);
            let (mut dg, mut dz, mut dm) = (0.0f64, 0.0f64, 0.0f64);
            let base = (b * s.c + c) * plane;
            for idx in base..base + plane {
                let v = pre_act.data()[idx];
                let go = g.data()[idx] as f64;
                dz += go;
                if v > gamma {
                    gx.data_mut()[idx] = go as f32;
                    dg -= go;
                } else {
                    gx.data_mut()[idx] = (go * slope as f64) as f32;
                    dg -= go * slope as f64;
                    dm += go * (v - gamma) as f64;
                }
            }
            g_gamma[c] += dg as f32;
            g_zeta[c] += dz as f32;
            g_slope[c] += dm as f32;
        }
    }
    (gx, g_gamma, g_zeta, g_slope)
}

fn upsample_backward(g: &FloatTensor, in_shape: Shape) -> FloatTensor {
    let mut out = FloatTensor::zeros(in_shape);
    for b in 0..in_shape.b {
        for c in 0..in_shape.c {
            for i in 0..in_shape.h {
                for j in 0..in_shape.w {
                    let mut acc = 0.0f32;
                    for di in 0..2 {
                        for dj in 0..2 {
                            acc += g.get(b, c, 2 * i + di, 2 * j + dj);
                        }
                    }
                    out.set(b, c, i, j, acc);
                }
            }
        }
    }
    out
}

/// Backward through the adapter. Returns the gradient wrt the shortcut
/// input and accumulates the projection-weight gradient.
fn sgra_backward(
    g: &FloatTensor,
    p: &SgraParams,
    x: &FloatTensor,
) -> Result<(FloatTensor, Vec<f32>)> {
    // invert the interleave: its inverse is the (m-group) interleave
    let perm = InterleavePerm::new(p.c_out, p.groups)?;
    let gs = g.shape();
    let mut gu = FloatTensor::zeros(gs);
    let plane = gs.h * gs.w;
    for b in 0..gs.b {
        for dst in 0..gs.c {
            let src = perm.source_of(dst);
            let sbase = (b * gs.c + src) * plane;
            let dbase = (b * gs.c + dst) * plane;
            let gd = g.data();
            gu.data_mut()[sbase..sbase + plane].copy_from_slice(&gd[dbase..dbase + plane]);
        }
    }

    let x_up;
    let x_in = if p.upsample {
        x_up = upsample_nearest2x(x);
        &x_up
    } else {
        x
    };
    let xs = x_in.shape();
    let (cin_g, cout_g) = (p.c_in_per(), p.c_out_per());
    let mut grad_w = vec![0.0f32; p.weight.len()];
    let mut gx = FloatTensor::zeros(xs);
    for k in 0..p.groups {
        for o in 0..cout_g {
            let oc = k * cout_g + o;
            for ic in 0..cin_g {
                let xc = k * cin_g + ic;
                let w = p.weight[(k * cout_g + o) * cin_g + ic] as f64;
                let mut acc = 0.0f64;
                for b in 0..gs.b {
                    for i in 0..gs.h {
                        for j in 0..gs.w {
                            let gv = gu.get(b, oc, i, j) as f64;
                            let (y, xcol) = (i * p.stride, j * p.stride);
                            acc += gv * x_in.get(b, xc, y, xcol) as f64;
                            let idx = xs.idx(b, xc, y, xcol);
                            gx.data_mut()[idx] += (gv * w) as f32;
                        }
                    }
                }
                grad_w[(k * cout_g + o) * cin_g + ic] = acc as f32;
            }
        }
    }
    let gx = if p.upsample { upsample_backward(&gx, x.shape()) } else { gx };
    Ok((gx, grad_w))
}

fn block_backward(
    g: &FloatTensor,
    name: &str,
    cfg: &BlockConfig,
    params: &BlockParams,
    cache: &BlockCache,
    mode: BinMode,
    grads: &mut Gradients,
) -> Result<FloatTensor> {
    // shortcut branch
    let gx_short = match cfg.shortcut {
        ShortcutKind::Identity => Some(g.clone()),
        ShortcutKind::None => None,
        ShortcutKind::Adapter => {
            let sgra = params.sgra.as_ref().expect("adapter params");
            let (gx, gw) = sgra_backward(g, sgra, &cache.x)?;
            grads.add(&format!("{name}.sgra.weight"), gw);
            Some(gx)
        }
    };

    // main branch: activation
    let (g_pre, g_gamma, g_zeta, g_slope) = rprelu_backward(g, &cache.pre_act, &params.rprelu);
    grads.add(&format!("{name}.rprelu.gamma"), g_gamma);
    grads.add(&format!("{name}.rprelu.zeta"), g_zeta);
    grads.add(&format!("{name}.rprelu.slope"), g_slope);

    // output scaling: pre_act = scales ⊙ pre_sum
    let s = g_pre.shape();
    let plane = s.h * s.w;
    let mut g_scales = vec![0.0f64; s.c];
    let mut g_sum = FloatTensor::zeros(s);
    for b in 0..s.b {
        for o in 0..s.c {
            let a = cache.scales.0[o] as f64;
            let base = (b * s.c + o) * plane;
            let mut acc = 0.0f64;
            for p in base..base + plane {
                let gp = g_pre.data()[p] as f64;
                acc += gp * cache.pre_sum.data()[p] as f64;
                g_sum.data_mut()[p] = (gp * a) as f32;
            }
            g_scales[o] += acc;
        }
    }

    // scales = mean |w| per filter: route into the latent weights
    let wshape = params.weight.shape();
    let fan = wshape.c * wshape.h * wshape.w;
    let mut g_w_alpha = vec![0.0f32; wshape.numel()];
    for o in 0..wshape.b {
        let go = g_scales[o] / fan as f64;
        for (i, gw) in g_w_alpha[o * fan..(o + 1) * fan].iter_mut().enumerate() {
            let w = params.weight.data()[o * fan + i];
            let sgn = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            *gw = (go * sgn) as f32;
        }
    }
    grads.add(&format!("{name}.weight"), g_w_alpha);

    // gate head (descriptors are frozen conditioning)
    if let (Some(_), Some(feats)) = (&params.gate_head, &cache.feats) {
        let (batch, channels) = (s.b, cfg.conv.c_in);
        let g_beta_of = |b: usize, c: usize| -> f64 {
            let mut acc = 0.0f64;
            match &cache.stack {
                StackCache::Int(st) => {
                    for o in 0..s.c {
                        let base = (b * s.c + o) * plane;
                        let gs_row = &g_sum.data()[base..base + plane];
                        for (g, &d) in gs_row.iter().zip(st.slice(b, o, c)) {
                            acc += *g as f64 * d as f64;
                        }
                    }
                }
                StackCache::Float(maps) => {
                    let base = b * s.c * plane;
                    let md = maps[c].data();
                    for p in 0..s.c * plane {
                        acc += g_sum.data()[base + p] as f64 * md[base + p] as f64;
                    }
                }
            }
            acc
        };
        let mut gw = [0.0f64; 5];
        let mut gb = 0.0f64;
        for b in 0..batch {
            for c in 0..channels {
                let beta = cache.beta.get(b, c) as f64;
                let gz = g_beta_of(b, c) * beta * (1.0 - beta);
                let f = feats.feature(b, c);
                for (acc, &fv) in gw.iter_mut().zip(f.iter()) {
                    *acc += gz * fv as f64;
                }
                gb += gz;
            }
        }
        grads.add(
            &format!("{name}.gate.weight"),
            gw.iter().map(|&v| v as f32).collect(),
        );
        grads.add(&format!("{name}.gate.bias"), vec![gb as f32]);
    }

    // conv bilinear backward with the gate folded per input channel
    let w_op_for_bwd = match mode {
        BinMode::Surrogate => params.weight.map(|v| v.clamp(-1.0, 1.0)),
        BinMode::Deploy => params.weight.map(|v| if v >= 0.0 { 1.0 } else { -1.0 }),
    };
    let gx_op = conv_grad_x(&w_op_for_bwd, &g_sum, &cfg.conv, cache.x.shape(), Some(&cache.beta));
    let gw_op = conv_grad_w(&cache.x_op, &g_sum, &cfg.conv, -1.0, Some(&cache.beta));

    // straight-through rules
    let (gx_main, g_t, g_act_slope) =
        ste_act_backward(&gx_op, &cache.x, &params.threshold, params.act_slope)?;
    grads.add(&format!("{name}.threshold"), g_t);
    grads.add(&format!("{name}.act_slope"), vec![g_act_slope]);
    let gw = ste_weight_backward(&gw_op, &params.weight)?;
    grads.add(&format!("{name}.weight"), gw.data().to_vec());

    match gx_short {
        Some(short) => add_tensors(&gx_main, &short),
        None => Ok(gx_main),
    }
}

/// Reverse pass over the cached forward. Returns gradients for every
/// learnable tensor; the gradient wrt the network input is discarded.
pub fn backward(net: &Network, caches: &ForwardCaches, grad_out: &FloatTensor) -> Result<Gradients> {
    let n = net.nodes.len();
    let mut grads = Gradients::new();
    let mut slots: Vec<Option<FloatTensor>> = (0..n).map(|_| None).collect();
    // global residual adds the input directly to the output, so the chain
    // gradient reaching the last node is grad_out unchanged
    slots[n - 1] = Some(grad_out.clone());

    for i in (0..n).rev() {
        let g = match slots[i].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &net.nodes[i];
        let gx = match (&node.layer, &caches.layers[i]) {
            (Layer::ConvFp { spec, weight }, LayerCache::ConvFp { x }) => {
                let gw = conv_grad_w(x, &g, spec, 0.0, None);
                grads.add(&format!("{}.weight", node.name), gw.data().to_vec());
                Some(conv_grad_x(weight, &g, spec, x.shape(), None))
            }
            (Layer::Block { cfg, params }, LayerCache::Block(cache)) => Some(block_backward(
                &g,
                &node.name,
                cfg,
                params,
                cache,
                caches.mode,
                &mut grads,
            )?),
            (Layer::Upsample2x, LayerCache::Upsample { in_shape }) => {
                Some(upsample_backward(&g, *in_shape))
            }
            (Layer::SkipAdd { from }, LayerCache::Skip) => {
                match &mut slots[*from] {
                    Some(acc) => {
                        let merged = add_tensors(acc, &g)?;
                        *acc = merged;
                    }
                    none => *none = Some(g.clone()),
                }
                Some(g)
            }
            _ => return Err(Error::Config("cache does not match layer graph".into())),
        };
        if i > 0 {
            if let Some(gx) = gx {
                match &mut slots[i - 1] {
                    Some(acc) => {
                        let merged = add_tensors(acc, &gx)?;
                        *acc = merged;
                    }
                    none => *none = Some(gx),
                }
            }
        }
    }
    Ok(grads)
}

/// Mean absolute error and its subgradient (`sign(out − target) / n`).
pub fn l1_loss(out: &FloatTensor, target: &FloatTensor) -> Result<(f64, FloatTensor)> {
    if out.shape() != target.shape() {
        return Err(Error::dim("l1_loss", target.shape(), out.shape()));
    }
    let n = out.shape().numel() as f64;
    let mut loss = 0.0f64;
    let mut grad = FloatTensor::zeros(out.shape());
    for (idx, (&o, &t)) in out.data().iter().zip(target.data()).enumerate() {
        let d = o as f64 - t as f64;
        loss += d.abs();
        grad.data_mut()[idx] = if d > 0.0 {
            (1.0 / n) as f32
        } else if d < 0.0 {
            (-1.0 / n) as f32
        } else {
            0.0
        };
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, seed: u64) -> FloatTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FloatTensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ste_act_full_passthrough_at_threshold() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
        let g = FloatTensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let (gx, _, _) =
            ste_act_backward(&g, &x, &ThresholdVector::zeros(1), 1.0).unwrap();
        assert_eq!(gx.data(), &[1.0]); // sech²(0) = 1
    }

    #[test]
    fn ste_act_saturates_far_from_threshold() {
        let x = FloatTensor::from_vec(Shape::new(1, 1, 1, 2), vec![10.0, -10.0]).unwrap();
        let g = FloatTensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        let (gx, _, _) = ste_act_backward(&g, &x, &ThresholdVector::zeros(1), 1.0).unwrap();
        assert!(gx.data().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn ste_act_matches_finite_differences() {
        let shape = Shape::new(1, 2, 3, 3);
        let x = random_tensor(shape, 3);
        let t = ThresholdVector(vec![0.1, -0.2]);
        let slope = 1.3f32;
        // loss = Σ w_i · tanh(slope (x_i + t_c)) for fixed random weights
        let wsum = random_tensor(shape, 4);
        let (gx, gt, gs) = ste_act_backward(&wsum, &x, &t, slope).unwrap();

        let loss = |xv: &FloatTensor, tv: &ThresholdVector, sv: f64| -> f64 {
            let mut acc = 0.0f64;
            for b in 0..shape.b {
                for c in 0..shape.c {
                    for i in 0..shape.h {
                        for j in 0..shape.w {
                            let u = xv.get(b, c, i, j) as f64 + tv.0[c] as f64;
                            acc += wsum.get(b, c, i, j) as f64 * (sv * u).tanh();
                        }
                    }
                }
            }
            acc
        };
        let h = 1e-4f32;
        // spot-check a few x entries; use the realized f32 step so rounding
        // of x ± h does not bias the quotient
        for &(b, c, i, j) in &[(0usize, 0usize, 0usize, 0usize), (0, 1, 2, 2), (0, 0, 1, 2)] {
            let v = x.get(b, c, i, j);
            let mut xp = x.clone();
            xp.set(b, c, i, j, v + h);
            let mut xm = x.clone();
            xm.set(b, c, i, j, v - h);
            let dh = (v + h) as f64 - (v - h) as f64;
            let fd = (loss(&xp, &t, slope as f64) - loss(&xm, &t, slope as f64)) / dh;
            let an = gx.get(b, c, i, j) as f64;
            assert!((fd - an).abs() / fd.abs().max(1e-6) < 1e-4, "{fd} vs {an}");
        }
        // thresholds
        for c in 0..2 {
            let mut tp = t.clone();
            tp.0[c] += h;
            let mut tm = t.clone();
            tm.0[c] -= h;
            let dh = tp.0[c] as f64 - tm.0[c] as f64;
            let fd = (loss(&x, &tp, slope as f64) - loss(&x, &tm, slope as f64)) / dh;
            assert!((fd - gt[c] as f64).abs() / fd.abs().max(1e-6) < 1e-4);
        }
        // slope (perturbed in f64, so the nominal step is exact)
        let fd = (loss(&x, &t, slope as f64 + h as f64) - loss(&x, &t, slope as f64 - h as f64))
            / (2.0 * h as f64);
        assert!((fd - gs as f64).abs() / fd.abs().max(1e-6) < 1e-4);
    }

    #[test]
    fn ste_weight_mask_is_exact_indicator() {
        let w = FloatTensor::from_vec(
            Shape::new(1, 1, 2, 3),
            vec![0.5, 1.5, -1.0, -2.0, 1.0, 0.0],
        )
        .unwrap();
        let g = FloatTensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0; 6]).unwrap();
        let masked = ste_weight_backward(&g, &w).unwrap();
        assert_eq!(masked.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_modes_share_structure() {
        let cfg = NetworkConfig {
            scales: 2,
            base_channels: 4,
            blocks_per_scale: 1,
            ..Default::default()
        };
        let net = build_network(&cfg, 11).unwrap();
        let x = random_tensor(Shape::new(1, 3, 8, 8), 12);
        let (yd, _) = forward_train(&net, &x, BinMode::Deploy).unwrap();
        let (ys, _) = forward_train(&net, &x, BinMode::Surrogate).unwrap();
        assert_eq!(yd.shape(), x.shape());
        assert_eq!(ys.shape(), x.shape());
        // inference equals the deploy-mode training forward bit-for-bit
        let yi = forward(&net, &x).unwrap();
        assert_eq!(yi, yd);
    }

    #[test]
    fn backward_produces_gradient_for_every_param() {
        let cfg = NetworkConfig {
            scales: 2,
            base_channels: 4,
            blocks_per_scale: 1,
            ..Default::default()
        };
        let net = build_network(&cfg, 11).unwrap();
        let x = random_tensor(Shape::new(1, 3, 8, 8), 12);
        let target = random_tensor(Shape::new(1, 3, 8, 8), 13);
        let (y, caches) = forward_train(&net, &x, BinMode::Deploy).unwrap();
        let (_, grad) = l1_loss(&y, &target).unwrap();
        let grads = backward(&net, &caches, &grad).unwrap();
        for info in net.param_infos() {
            let g = grads.get(&info.name).unwrap_or_else(|| panic!("missing {}", info.name));
            assert_eq!(g.len(), info.shape.iter().product::<usize>());
            assert!(g.iter().all(|v| v.is_finite()), "{}", info.name);
        }
    }

    #[test]
    fn zero_weight_block_with_identity_shortcut_is_identity() {
        // mean |w| = 0 annihilates the main branch
        let conv = ConvSpec::new(3, 3, 3, 1, 1).unwrap();
        let cfg = BlockConfig { conv, use_mabg: false, shortcut: ShortcutKind::Identity };
        let params = BlockParams {
            weight: FloatTensor::zeros(conv.weight_shape()),
            threshold: ThresholdVector::zeros(3),
            act_slope: 1.0,
            rprelu: crate::conv::RpreluParams::identity(3),
            gate_head: None,
            sgra: None,
        };
        let x = random_tensor(Shape::new(1, 3, 6, 6), 21);
        let y = block_forward(&x, &cfg, &params).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn half_gate_halves_main_branch() {
        let conv = ConvSpec::new(3, 3, 3, 1, 1).unwrap();
        let cfg = BlockConfig { conv, use_mabg: false, shortcut: ShortcutKind::None };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = BlockParams {
            weight: FloatTensor::from_vec(
                conv.weight_shape(),
                (0..conv.weight_shape().numel()).map(|_| rng.random_range(-0.2..0.2)).collect(),
            )
            .unwrap(),
            threshold: ThresholdVector::zeros(3),
            act_slope: 1.0,
            rprelu: crate::conv::RpreluParams::identity(3),
            gate_head: None,
            sgra: None,
        };
        let x = random_tensor(Shape::new(1, 3, 6, 6), 32);

        // gated conv with β ≡ 0.5 equals 0.5 × the ungated main branch
        // (identity activation makes the block linear in the conv output)
        let full = block_forward(&x, &cfg, &params).unwrap();
        let beta = GateVector::uniform(1, 3, 0.5);
        let half = crate::conv::gated_binary_conv(
            &x,
            &params.weight,
            &params.threshold,
            &beta,
            &conv,
        )
        .unwrap();
        for (h, f) in half.data().iter().zip(full.data()) {
            assert_eq!(*h, f * 0.5);
        }
    }

    #[test]
    fn block_output_shapes_across_configs() {
        // 12 (c_in, c_out, stride) combinations against the conv geometry
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let combos = [
            (4usize, 4usize, 1usize),
            (4, 8, 1),
            (8, 4, 1),
            (4, 4, 2),
            (4, 8, 2),
            (8, 4, 2),
            (6, 9, 1),
            (9, 6, 1),
            (6, 6, 2),
            (8, 8, 1),
            (3, 12, 2),
            (12, 3, 1),
        ];
        for (c_in, c_out, stride) in combos {
            let conv = ConvSpec::new(c_in, c_out, 3, stride, 1).unwrap();
            let shortcut = if c_in == c_out && stride == 1 {
                ShortcutKind::Identity
            } else {
                ShortcutKind::Adapter
            };
            let sgra = matches!(shortcut, ShortcutKind::Adapter).then(|| {
                let g = crate::sgra::choose_groups(c_in, c_out);
                crate::sgra::SgraParams::new(
                    c_in,
                    c_out,
                    g,
                    stride,
                    false,
                    (0..c_in * c_out / g).map(|_| rng.random_range(-0.5..0.5)).collect(),
                )
                .unwrap()
            });
            let cfg = BlockConfig { conv, use_mabg: true, shortcut };
            let params = BlockParams {
                weight: random_tensor(conv.weight_shape(), 91),
                threshold: ThresholdVector::zeros(c_in),
                act_slope: 1.0,
                rprelu: crate::conv::RpreluParams::identity(c_out),
                gate_head: Some(crate::mabg::GateHead::zeros()),
                sgra,
            };
            let x = random_tensor(Shape::new(1, c_in, 8, 8), 92);
            let y = block_forward(&x, &cfg, &params).unwrap();
            let (ho, wo) = conv.output_hw(8, 8).unwrap();
            assert_eq!(y.shape(), Shape::new(1, c_out, ho, wo), "{c_in}->{c_out} s{stride}");
        }
    }

    #[test]
    fn l1_loss_and_grad() {
        let a = FloatTensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let b = FloatTensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 0.0]).unwrap();
        let (loss, grad) = l1_loss(&a, &b).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad.data(), &[0.5, 0.0]);
    }
}
