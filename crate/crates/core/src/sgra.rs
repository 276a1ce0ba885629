//! Shuffle-grouped shortcut adapter.
//!
//! Shortcut inputs whose shape differs from the main branch are aligned by
//! a structured sparse 1×1 projection: channels split into `g` contiguous
//! partitions (`g = gcd(c_in, c_out)` by default), each projected by its
//! own small matrix at a spatial stride, followed by an interleaving
//! permutation that alternates channels across partitions.

use crate::conv::upsample_nearest2x;
use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};
use serde::Serialize;

/// Partition count for a channel transition, the gcd of the two widths.
pub fn choose_groups(c_in: usize, c_out: usize) -> usize {
    gcd(c_in, c_out)
}

/// Partition count with an ablation override: `gcd / divisor`, which must
/// stay an exact divisor split.
pub fn choose_groups_with_divisor(c_in: usize, c_out: usize, divisor: usize) -> Result<usize> {
    let g = gcd(c_in, c_out);
    if divisor == 0 || g % divisor != 0 {
        return Err(Error::Config(format!(
            "group divisor {divisor} does not divide gcd({c_in},{c_out}) = {g}"
        )));
    }
    Ok(g / divisor)
}

fn gcd(a: usize, b: usize) -> usize {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Parameters of one adapter: `g` projection matrices of `c_out_per ×
/// c_in_per` plus the spatial stride. `weight` is flat in `(partition,
/// out, in)` order. `identity` marks a pass-through shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct SgraParams {
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub upsample: bool,
    pub weight: Vec<f32>,
    pub identity: bool,
}

impl SgraParams {
    pub fn identity() -> Self {
        SgraParams {
            groups: 1,
            c_in: 0,
            c_out: 0,
            stride: 1,
            upsample: false,
            weight: Vec::new(),
            identity: true,
        }
    }

    pub fn new(
        c_in: usize,
        c_out: usize,
        groups: usize,
        stride: usize,
        upsample: bool,
        weight: Vec<f32>,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} must divide both {c_in} and {c_out}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("sgra stride must be >= 1".into()));
        }
        let expect = c_in * c_out / groups;
        if weight.len() != expect {
            return Err(Error::dim("SgraParams weights", expect, weight.len()));
        }
        Ok(SgraParams { groups, c_in, c_out, stride, upsample, weight, identity: false })
    }

    #[inline]
    pub fn c_in_per(&self) -> usize {
        self.c_in / self.groups
    }

    #[inline]
    pub fn c_out_per(&self) -> usize {
        self.c_out / self.groups
    }

    /// Number of projection parameters: `c_in * c_out / g`.
    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }

    #[inline]
    fn w(&self, k: usize, o: usize, i: usize) -> f32 {
        self.weight[(k * self.c_out_per() + o) * self.c_in_per() + i]
    }
}

/// The interleaving permutation `dst = t·g + k ← src = k·m + t` on
/// `c = g · m` channels.
#[derive(Clone, Debug)]
pub struct InterleavePerm {
    pub groups: usize,
    pub per_group: usize,
}

impl InterleavePerm {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::dim("InterleavePerm", format!("multiple of {groups}"), channels));
        }
        Ok(InterleavePerm { groups, per_group: channels / groups })
    }

    /// Source channel feeding destination channel `dst`.
    #[inline]
    pub fn source_of(&self, dst: usize) -> usize {
        let t = dst / self.groups;
        let k = dst % self.groups;
        k * self.per_group + t
    }
}

/// Apply the interleave: `y[:, t·g+k] = u[:, k·m+t]`.
pub fn interleave(u: &FloatTensor, groups: usize) -> Result<FloatTensor> {
    let s = u.shape();
    let perm = InterleavePerm::new(s.c, groups)?;
    let mut out = FloatTensor::zeros(s);
    let plane = s.h * s.w;
    for b in 0..s.b {
        for dst in 0..s.c {
            let src = perm.source_of(dst);
            let sbase = (b * s.c + src) * plane;
            let dbase = (b * s.c + dst) * plane;
            let (sv, dv) = (u.data(), &mut out.data_mut()[dbase..dbase + plane]);
            dv.copy_from_slice(&sv[sbase..sbase + plane]);
        }
    }
    Ok(out)
}

/// Partition-wise projection with spatial subsampling:
/// `u_k(:, i, j) = w_k · x_k(:, s·i, s·j)`.
pub fn partition_project(x: &FloatTensor, p: &SgraParams) -> Result<FloatTensor> {
    let s = x.shape();
    if s.c != p.c_in {
        return Err(Error::dim("partition_project channels", p.c_in, s.c));
    }
    let (h_out, w_out) = (s.h.div_ceil(p.stride), s.w.div_ceil(p.stride));
    let (cin_g, cout_g) = (p.c_in_per(), p.c_out_per());
    let mut out = FloatTensor::zeros(Shape::new(s.b, p.c_out, h_out, w_out));
    for b in 0..s.b {
        for k in 0..p.groups {
            for o in 0..cout_g {
                let oc = k * cout_g + o;
                for i in 0..h_out {
                    for j in 0..w_out {
                        let mut acc = 0.0f64;
                        for ic in 0..cin_g {
                            let xc = k * cin_g + ic;
                            acc += p.w(k, o, ic) as f64
                                * x.get(b, xc, i * p.stride, j * p.stride) as f64;
                        }
                        out.set(b, oc, i, j, acc as f32);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Full adapter: identity when marked and shapes already match, otherwise
/// optional 2× nearest-neighbour upsample, partition projection, and
/// interleaved mixing. The result must land exactly on `target`.
pub fn sgra_forward(x: &FloatTensor, p: &SgraParams, target: Shape) -> Result<FloatTensor> {
    if p.identity {
        if x.shape() != target {
            return Err(Error::Config(format!(
                "identity shortcut cannot reach {target} from {}",
                x.shape()
            )));
        }
        return Ok(x.clone());
    }
    let x_prep;
    let x_ref = if p.upsample {
        x_prep = upsample_nearest2x(x);
        &x_prep
    } else {
        x
    };
    let u = partition_project(x_ref, p)?;
    let y = interleave(&u, p.groups)?;
    if y.shape() != target {
        return Err(Error::Config(format!(
            "shortcut produced {} but the main branch needs {target}",
            y.shape()
        )));
    }
    Ok(y)
}

/// One histogram record for external plotting.
#[derive(Clone, Debug, Serialize)]
pub struct GroupHistogram {
    pub group: usize,
    pub phase: &'static str,
    pub bin_edges: Vec<f32>,
    pub counts: Vec<u64>,
}

/// Per-group activation histograms before and after interleaving. Bin
/// edges are shared across all records so the distributions are directly
/// comparable.
pub fn group_distribution_report(
    u_before: &FloatTensor,
    y_after: &FloatTensor,
    groups: usize,
    bins: usize,
) -> Result<Vec<GroupHistogram>> {
    if bins < 2 {
        return Err(Error::domain("group_distribution_report", "bins must be >= 2"));
    }
    let s = u_before.shape();
    if y_after.shape() != s {
        return Err(Error::dim("group_distribution_report", s, y_after.shape()));
    }
    if s.c % groups != 0 {
        return Err(Error::dim("group_distribution_report groups", format!("divisor of {}", s.c), groups));
    }
    let m = s.c / groups;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in u_before.data().iter().chain(y_after.data()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo >= hi {
        // degenerate constant input: one central bin catches everything
        lo -= 0.5;
        hi += 0.5;
    }
    let edges: Vec<f32> = (0..=bins)
        .map(|i| lo + (hi - lo) * i as f32 / bins as f32)
        .collect();
    let bin_of = |v: f32| -> usize {
        let t = ((v - lo) / (hi - lo) * bins as f32) as usize;
        t.min(bins - 1)
    };
    let plane = s.h * s.w;
    let mut records = Vec::with_capacity(2 * groups);
    for (phase, tensor, channel_of_group) in [
        ("before", u_before, true),
        ("after", y_after, false),
    ] {
        for k in 0..groups {
            let mut counts = vec![0u64; bins];
            for t in 0..m {
                // before mixing group k owns a contiguous block; after
                // mixing its channels sit at t·g + k
                let c = if channel_of_group { k * m + t } else { t * groups + k };
                for b in 0..s.b {
                    let base = (b * s.c + c) * plane;
                    for &v in &tensor.data()[base..base + plane] {
                        counts[bin_of(v)] += 1;
                    }
                }
            }
            records.push(GroupHistogram { group: k, phase, bin_edges: edges.clone(), counts });
        }
    }
    Ok(records)
}
