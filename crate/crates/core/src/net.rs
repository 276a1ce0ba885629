//! Toy multi-scale encoder–decoder assembled from binarized residual
//! blocks, plus parameter/operation accounting.
//!
//! The backbone is a small U-shape: a full-precision stem, per-scale
//! binarized blocks, stride-2 binarized downsampling, nearest-neighbour
//! upsampling with a channel-reducing binarized block on the way up, skip
//! additions between matching scales, and a full-precision output conv
//! with a global residual. Shortcut shape mismatches (channel width or
//! stride) are bridged by the shuffle-grouped adapter.

use crate::conv::{ConvSpec, RpreluParams};
use crate::error::{Error, Result};
use crate::mabg::GateHead;
use crate::sgra::{choose_groups, SgraParams};
use crate::tensor::{FloatTensor, ThresholdVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_scales() -> usize { 2 }
fn default_base_channels() -> usize { 16 }
fn default_blocks_per_scale() -> usize { 2 }
fn default_io_channels() -> usize { 3 }
fn default_true() -> bool { true }

/// Topology of the toy backbone. The first and last convolutions always
/// stay full-precision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_scales")]
    pub scales: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_blocks_per_scale")]
    pub blocks_per_scale: usize,
    #[serde(default = "default_io_channels")]
    pub in_channels: usize,
    #[serde(default = "default_io_channels")]
    pub out_channels: usize,
    #[serde(default = "default_true")]
    pub use_mabg: bool,
    #[serde(default = "default_true")]
    pub use_sgra: bool,
    #[serde(default = "default_true")]
    pub global_residual: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: default_scales(),
            base_channels: default_base_channels(),
            blocks_per_scale: default_blocks_per_scale(),
            in_channels: default_io_channels(),
            out_channels: default_io_channels(),
            use_mabg: true,
            use_sgra: true,
            global_residual: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.base_channels == 0 || self.blocks_per_scale == 0 {
            return Err(Error::Config(
                "scales, base_channels and blocks_per_scale must be >= 1".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("io channels must be >= 1".into()));
        }
        if self.global_residual && self.in_channels != self.out_channels {
            return Err(Error::Config(
                "global residual needs matching input/output channels".into(),
            ));
        }
        Ok(())
    }
}

/// How a block aligns its shortcut with the main branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutKind {
    /// Shapes match; pass the input through unchanged.
    Identity,
    /// Shuffle-grouped adapter bridging channel/stride mismatches.
    Adapter,
    /// No shortcut (ablation baseline for mismatched shapes).
    None,
}

/// One binarized residual block.
#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub conv: ConvSpec,
    pub use_mabg: bool,
    pub shortcut: ShortcutKind,
}

/// Learnable state of one block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    /// Latent full-precision conv weights; their sign is the deployed kernel.
    pub weight: FloatTensor,
    pub threshold: ThresholdVector,
    /// Sharpness of the tanh surrogate used in the backward pass.
    pub act_slope: f32,
    pub rprelu: RpreluParams,
    pub gate_head: Option<GateHead>,
    pub sgra: Option<SgraParams>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    ConvFp { spec: ConvSpec, weight: FloatTensor },
    Block { cfg: BlockConfig, params: BlockParams },
    Upsample2x,
    SkipAdd { from: usize },
}

#[derive(Clone, Debug)]
pub struct LayerNode {
    pub name: String,
    pub layer: Layer,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub nodes: Vec<LayerNode>,
}

fn uniform_weights(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn make_block(
    rng: &mut ChaCha8Rng,
    cfg: &NetworkConfig,
    conv: ConvSpec,
    shortcut: ShortcutKind,
    upsampled_shortcut: bool,
) -> Result<Layer> {
    let wshape = conv.weight_shape();
    let fan_in = conv.c_in * conv.k * conv.k;
    let weight = FloatTensor::from_vec(wshape, uniform_weights(rng, wshape.numel(), fan_in))?;
    let sgra = match shortcut {
        ShortcutKind::Adapter => {
            let g = choose_groups(conv.c_in, conv.c_out);
            let n = conv.c_in * conv.c_out / g;
            let w = uniform_weights(rng, n, conv.c_in / g);
            Some(SgraParams::new(
                conv.c_in,
                conv.c_out,
                g,
                conv.stride,
                upsampled_shortcut,
                w,
            )?)
        }
        _ => None,
    };
    Ok(Layer::Block {
        cfg: BlockConfig { conv, use_mabg: cfg.use_mabg, shortcut },
        params: BlockParams {
            weight,
            threshold: ThresholdVector::zeros(conv.c_in),
            act_slope: 1.0,
            rprelu: RpreluParams::with_slope(conv.c_out, 0.25),
            gate_head: cfg.use_mabg.then(GateHead::zeros),
            sgra,
        },
    })
}

/// Build the layer graph with deterministic parameter initialization.
/// Identical seeds yield bit-identical parameters.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<LayerNode> = Vec::new();
    let ch = |s: usize| cfg.base_channels << s;
    let mismatch_shortcut = if cfg.use_sgra { ShortcutKind::Adapter } else { ShortcutKind::None };

    let stem = ConvSpec::new(cfg.in_channels, cfg.base_channels, 3, 1, 1)?;
    let wshape = stem.weight_shape();
    nodes.push(LayerNode {
        name: "first_conv".into(),
        layer: Layer::ConvFp {
            spec: stem,
            weight: FloatTensor::from_vec(
                wshape,
                uniform_weights(&mut rng, wshape.numel(), cfg.in_channels * 9),
            )?,
        },
    });

    // encoder
    let mut enc_tail = vec![0usize; cfg.scales];
    for s in 0..cfg.scales {
        for i in 0..cfg.blocks_per_scale {
            let conv = ConvSpec::new(ch(s), ch(s), 3, 1, 1)?;
            nodes.push(LayerNode {
                name: format!("enc{s}_b{i}"),
                layer: make_block(&mut rng, cfg, conv, ShortcutKind::Identity, false)?,
            });
        }
        enc_tail[s] = nodes.len() - 1;
        if s + 1 < cfg.scales {
            let conv = ConvSpec::new(ch(s), ch(s + 1), 3, 2, 1)?;
            nodes.push(LayerNode {
                name: format!("down{}", s + 1),
                layer: make_block(&mut rng, cfg, conv, mismatch_shortcut, false)?,
            });
        }
    }

    // decoder
    for s in (0..cfg.scales.saturating_sub(1)).rev() {
        nodes.push(LayerNode { name: format!("up{s}"), layer: Layer::Upsample2x });
        let conv = ConvSpec::new(ch(s + 1), ch(s), 3, 1, 1)?;
        nodes.push(LayerNode {
            name: format!("dec{s}_reduce"),
            layer: make_block(&mut rng, cfg, conv, mismatch_shortcut, false)?,
        });
        nodes.push(LayerNode {
            name: format!("skip{s}"),
            layer: Layer::SkipAdd { from: enc_tail[s] },
        });
        for i in 1..cfg.blocks_per_scale {
            let conv = ConvSpec::new(ch(s), ch(s), 3, 1, 1)?;
            nodes.push(LayerNode {
                name: format!("dec{s}_b{i}"),
                layer: make_block(&mut rng, cfg, conv, ShortcutKind::Identity, false)?,
            });
        }
    }

    let out_spec = ConvSpec::new(cfg.base_channels, cfg.out_channels, 3, 1, 1)?;
    let wshape = out_spec.weight_shape();
    // near-zero output projection: with the global residual the network
    // starts at the identity restoration and learns the correction
    let mut last_w = uniform_weights(&mut rng, wshape.numel(), cfg.base_channels * 9);
    for v in last_w.iter_mut() {
        *v *= 0.05;
    }
    nodes.push(LayerNode {
        name: "last_conv".into(),
        layer: Layer::ConvFp { spec: out_spec, weight: FloatTensor::from_vec(wshape, last_w)? },
    });

    Ok(Network { cfg: cfg.clone(), nodes })
}

/// A named learnable tensor of the network, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Whether this tensor is the latent weight of a binarized conv.
    pub binarized: bool,
    /// Whether the owning block runs the frequency gate.
    pub gated: bool,
}

impl Network {
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Canonical enumeration of every learnable tensor.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.layer {
                Layer::ConvFp { weight, .. } => {
                    let s = weight.shape();
                    out.push(ParamInfo {
                        name: format!("{}.weight", node.name),
                        shape: vec![s.b, s.c, s.h, s.w],
                        binarized: false,
                        gated: false,
                    });
                }
                Layer::Block { cfg, params } => {
                    let s = params.weight.shape();
                    let gated = cfg.use_mabg;
                    let push = |out: &mut Vec<ParamInfo>, suffix: &str, shape: Vec<usize>, bin: bool| {
                        out.push(ParamInfo {
                            name: format!("{}.{suffix}", node.name),
                            shape,
                            binarized: bin,
                            gated,
                        });
                    };
                    push(&mut out, "weight", vec![s.b, s.c, s.h, s.w], true);
                    push(&mut out, "threshold", vec![cfg.conv.c_in], false);
                    push(&mut out, "act_slope", vec![1], false);
                    push(&mut out, "rprelu.gamma", vec![cfg.conv.c_out], false);
                    push(&mut out, "rprelu.zeta", vec![cfg.conv.c_out], false);
                    push(&mut out, "rprelu.slope", vec![cfg.conv.c_out], false);
                    if params.gate_head.is_some() {
                        push(&mut out, "gate.weight", vec![5], false);
                        push(&mut out, "gate.bias", vec![1], false);
                    }
                    if let Some(sgra) = &params.sgra {
                        push(&mut out, "sgra.weight", vec![sgra.weight_count()], false);
                    }
                }
                Layer::Upsample2x | Layer::SkipAdd { .. } => {}
            }
        }
        out
    }

    pub fn param_slice(&self, name: &str) -> Option<&[f32]> {
        let (node_name, suffix) = name.split_once('.')?;
        let node = self.nodes.iter().find(|n| n.name == node_name)?;
        match &node.layer {
            Layer::ConvFp { weight, .. } if suffix == "weight" => Some(weight.data()),
            Layer::Block { params, .. } => match suffix {
                "weight" => Some(params.weight.data()),
                "threshold" => Some(&params.threshold.0),
                "act_slope" => Some(std::slice::from_ref(&params.act_slope)),
                "rprelu.gamma" => Some(&params.rprelu.gamma),
                "rprelu.zeta" => Some(&params.rprelu.zeta),
                "rprelu.slope" => Some(&params.rprelu.slope),
                "gate.weight" => params.gate_head.as_ref().map(|h| &h.weight[..]),
                "gate.bias" => params.gate_head.as_ref().map(|h| std::slice::from_ref(&h.bias)),
                "sgra.weight" => params.sgra.as_ref().map(|s| &s.weight[..]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn param_slice_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let (node_name, suffix) = name.split_once('.')?;
        let node = self.nodes.iter_mut().find(|n| n.name == node_name)?;
        match &mut node.layer {
            Layer::ConvFp { weight, .. } if suffix == "weight" => Some(weight.data_mut()),
            Layer::Block { params, .. } => match suffix {
                "weight" => Some(params.weight.data_mut()),
                "threshold" => Some(&mut params.threshold.0),
                "act_slope" => Some(std::slice::from_mut(&mut params.act_slope)),
                "rprelu.gamma" => Some(&mut params.rprelu.gamma),
                "rprelu.zeta" => Some(&mut params.rprelu.zeta),
                "rprelu.slope" => Some(&mut params.rprelu.slope),
                "gate.weight" => params.gate_head.as_mut().map(|h| &mut h.weight[..]),
                "gate.bias" => params.gate_head.as_mut().map(|h| std::slice::from_mut(&mut h.bias)),
                "sgra.weight" => params.sgra.as_mut().map(|s| &mut s.weight[..]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_infos()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// FNV-1a over the raw parameter bits, in canonical order.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for info in self.param_infos() {
            for &v in self.param_slice(&info.name).unwrap() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }

    /// Inference forward pass (deployed binary semantics).
    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        crate::autograd::forward(self, x)
    }
}

/// One accounting row. Binarized rows report `params_f/32` parameters and
/// `ops_f/64` operations; both divisions are by powers of two and thus
/// exact in f64.
#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params_f: u64,
    pub params_b: f64,
    pub ops_f: u128,
    pub ops_b: f64,
    pub binarized: bool,
}

impl CostRow {
    fn full(name: String, params: u64, ops: u128) -> Self {
        CostRow { name, params_f: params, params_b: 0.0, ops_f: ops, ops_b: 0.0, binarized: false }
    }

    fn binary(name: String, params: u64, ops: u128) -> Self {
        CostRow {
            name,
            params_f: params,
            params_b: params as f64 / 32.0,
            ops_f: ops,
            ops_b: ops as f64 / 64.0,
            binarized: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    /// Parameters contributed by full-precision rows.
    pub fn params_full(&self) -> u64 {
        self.rows.iter().filter(|r| !r.binarized).map(|r| r.params_f).sum()
    }

    /// Parameters contributed by binarized rows, at 1/32 each.
    pub fn params_binary(&self) -> f64 {
        self.rows.iter().filter(|r| r.binarized).map(|r| r.params_b).sum()
    }

    pub fn total_params(&self) -> f64 {
        self.params_full() as f64 + self.params_binary()
    }

    pub fn ops_full(&self) -> u128 {
        self.rows.iter().filter(|r| !r.binarized).map(|r| r.ops_f).sum()
    }

    pub fn ops_binary(&self) -> f64 {
        self.rows.iter().filter(|r| r.binarized).map(|r| r.ops_b).sum()
    }

    pub fn total_ops(&self) -> f64 {
        self.ops_full() as f64 + self.ops_binary()
    }
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<22} {:>10} {:>12} {:>14} {:>14}  {}",
            "layer", "params_f", "params_b", "ops_f", "ops_b", "binarized"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<22} {:>10} {:>12.2} {:>14} {:>14.1}  {}",
                r.name, r.params_f, r.params_b, r.ops_f, r.ops_b, r.binarized
            )?;
        }
        writeln!(
            f,
            "totals: params = {:.1} (full {} + binary {:.1}), ops = {:.1} (full {} + binary {:.1})",
            self.total_params(),
            self.params_full(),
            self.params_binary(),
            self.total_ops(),
            self.ops_full(),
            self.ops_binary(),
        )
    }
}

/// Multiply–accumulate and element-op accounting for one forward pass on
/// the given input size. Conv rows count `c_out·c_in·k²·h'·w'` MACs; the
/// gate's descriptor pipeline is charged 8 element ops per input pixel per
/// channel plus a small per-channel head cost; the adapter is charged its
/// projection MACs. Binarized conv rows get the 1/32 and 1/64 ratios.
pub fn count_params_ops(net: &Network, input_hw: (usize, usize)) -> Result<CostReport> {
    let (mut h, mut w) = input_hw;
    if h == 0 || w == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new(); // (c, h, w) per node
    let mut c = net.cfg.in_channels;
    for node in &net.nodes {
        match &node.layer {
            Layer::ConvFp { spec, weight } => {
                let (ho, wo) = spec.output_hw(h, w)?;
                let macs = (spec.c_out * spec.c_in * spec.k * spec.k) as u128 * (ho * wo) as u128;
                rows.push(CostRow::full(node.name.clone(), weight.shape().numel() as u64, macs));
                (c, h, w) = (spec.c_out, ho, wo);
            }
            Layer::Block { cfg, params } => {
                let spec = &cfg.conv;
                let (ho, wo) = spec.output_hw(h, w)?;
                let conv_params = (spec.c_out * spec.c_in * spec.k * spec.k) as u64;
                let conv_macs = conv_params as u128 * (ho * wo) as u128;
                rows.push(CostRow::binary(format!("{}.conv", node.name), conv_params, conv_macs));

                let aux_params = (spec.c_in + 1 + 3 * spec.c_out) as u64;
                let aux_ops = (spec.c_in * h * w + spec.c_out * ho * wo) as u128;
                rows.push(CostRow::full(format!("{}.aux", node.name), aux_params, aux_ops));

                if params.gate_head.is_some() {
                    let gate_ops = (8 * spec.c_in * h * w + 16 * spec.c_in) as u128;
                    rows.push(CostRow::full(format!("{}.mabg", node.name), 6, gate_ops));
                }
                if let Some(sgra) = &params.sgra {
                    let macs = sgra.weight_count() as u128 * (ho * wo) as u128;
                    rows.push(CostRow::full(
                        format!("{}.sgra", node.name),
                        sgra.weight_count() as u64,
                        macs,
                    ));
                }
                (c, h, w) = (spec.c_out, ho, wo);
            }
            Layer::Upsample2x => {
                rows.push(CostRow::full(node.name.clone(), 0, 0));
                (h, w) = (h * 2, w * 2);
            }
            Layer::SkipAdd { from } => {
                let (fc, fh, fw) = shapes[*from];
                if (fc, fh, fw) != (c, h, w) {
                    return Err(Error::Config(format!(
                        "skip source shape ({fc},{fh},{fw}) does not match ({c},{h},{w})"
                    )));
                }
                rows.push(CostRow::full(node.name.clone(), 0, 0));
            }
        }
        shapes.push((c, h, w));
    }
    Ok(CostReport { rows })
}
