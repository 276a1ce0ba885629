//! Runtime verification suites: oracle-equivalence and invariant checks
//! runnable from the CLI, with a fault-injection hook proving the harness
//! can fail.

pub mod gradcheck;
pub mod reference;

use crate::conv::{
    gated_binary_conv, gated_binary_conv_literal, gated_binary_conv_packed, rprelu, xnor_conv2d,
    ConvSpec, RpreluParams,
};
use crate::error::Result;
use crate::mabg::{
    descriptors, freq_descriptors, haar_dwt, haar_idwt, pad_to_even, predict_gate,
    subband_energies, GateHead, GateVector,
};
use crate::sgra::{
    choose_groups, choose_groups_with_divisor, interleave, partition_project, InterleavePerm,
    SgraParams,
};
use crate::tensor::{pack, pack_filters, unpack, FloatTensor, Shape, ThresholdVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One printed check line.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn push(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.lines.push(CheckLine { name: name.into(), pass, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn merge(&mut self, other: SuiteReport) {
        self.lines.extend(other.lines);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&format!(
                "{} {}: {}\n",
                if l.pass { "[PASS]" } else { "[FAIL]" },
                l.name,
                l.detail
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Corrupt one kernel result before comparison; the suite must fail.
    pub inject_fault: bool,
}

fn random_pm1(shape: Shape, rng: &mut ChaCha8Rng) -> FloatTensor {
    FloatTensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| if rng.random_range(0.0..1.0) < 0.5 { -1.0f32 } else { 1.0 })
            .collect(),
    )
    .unwrap()
}

fn random_real(shape: Shape, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> FloatTensor {
    FloatTensor::from_vec(
        shape,
        (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Kernel suite: bit round trips, packed conv vs the naive oracle, gated
/// conv vs the per-channel f64 oracle, path agreement, activation oracle.
pub fn run_kernels(opts: VerifyOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);

    // pack/unpack exact round trips over random shapes
    let mut rt_ok = 0usize;
    const RT_CASES: usize = 500;
    for _ in 0..RT_CASES {
        let shape = Shape::new(
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..130),
        );
        let x = random_pm1(shape, &mut rng);
        if unpack(&pack(&x)?) == x && unpack(&pack_filters(&x)?) == x {
            rt_ok += 1;
        }
    }
    report.push(
        "pack/unpack",
        rt_ok == RT_CASES,
        format!("{rt_ok}/{RT_CASES} exact round trips"),
    );

    // packed conv vs naive float conv, tolerance zero
    let mut conv_ok = 0usize;
    const CONV_CASES: usize = 200;
    for case in 0..CONV_CASES {
        let c_in = rng.random_range(1..6usize);
        let c_out = rng.random_range(1..6usize);
        let k = rng.random_range(1..5usize);
        let stride = rng.random_range(1..3usize);
        let padding = rng.random_range(0..3usize);
        let h = rng.random_range(k..k + 12);
        let w = rng.random_range(k..k + 80);
        let spec = ConvSpec::new(c_in, c_out, k, stride, padding)?;
        if spec.output_hw(h, w).is_err() {
            conv_ok += 1; // config rejected consistently by both paths
            continue;
        }
        let x = random_pm1(Shape::new(rng.random_range(1..3), c_in, h, w), &mut rng);
        let wt = random_pm1(spec.weight_shape(), &mut rng);
        let mut got = xnor_conv2d(&pack(&x)?, &pack_filters(&wt)?, &spec)?;
        if opts.inject_fault && case == 0 {
            // simulate a miscounted popcount in the first output
            got.data_mut()[0] += 2.0;
        }
        let want = reference::conv2d_pm1(&x, &wt, &spec)?;
        if got == want {
            conv_ok += 1;
        }
    }
    report.push(
        "xnor_conv2d",
        conv_ok == CONV_CASES,
        format!("{conv_ok}/{CONV_CASES} exact vs naive ±1 conv"),
    );

    // gated conv vs the f64 per-channel oracle, and exact path agreement
    let mut gated_ok = 0usize;
    let mut agree_ok = 0usize;
    const GATED_CASES: usize = 100;
    for _ in 0..GATED_CASES {
        let c_in = rng.random_range(1..5usize);
        let c_out = rng.random_range(1..5usize);
        let k = rng.random_range(1..4usize);
        let spec = ConvSpec::new(c_in, c_out, k, 1, rng.random_range(0..2usize))?;
        let b = rng.random_range(1..3usize);
        let h = rng.random_range(k + 1..k + 8);
        let x = random_real(Shape::new(b, c_in, h, h), &mut rng, -1.0, 1.0);
        let wt = random_real(spec.weight_shape(), &mut rng, -1.0, 1.0);
        let t = ThresholdVector((0..c_in).map(|_| rng.random_range(-0.3..0.3)).collect());
        let beta = GateVector::from_values(
            b,
            c_in,
            (0..b * c_in).map(|_| rng.random_range(0.01..0.99)).collect(),
        )?;
        let got = gated_binary_conv(&x, &wt, &t, &beta, &spec)?;
        let want = reference::gated_conv_oracle(&x, &wt, &t, &beta, &spec)?;
        let ok = got
            .data()
            .iter()
            .zip(&want)
            .all(|(&g, &w)| ((g as f64 - w) / w.abs().max(1e-9)).abs() < 1e-6);
        if ok {
            gated_ok += 1;
        }

        let ones = GateVector::uniform(b, c_in, 1.0);
        let lit = gated_binary_conv_literal(&x, &wt, &t, &ones, &spec)?;
        let packed = gated_binary_conv_packed(&x, &wt, &t, &ones, &spec)?;
        if lit == packed {
            agree_ok += 1;
        }
    }
    report.push(
        "gated_binary_conv",
        gated_ok == GATED_CASES,
        format!("{gated_ok}/{GATED_CASES} within 1e-6 of per-channel oracle"),
    );
    report.push(
        "gated paths",
        agree_ok == GATED_CASES,
        format!("{agree_ok}/{GATED_CASES} literal == packed at unit gate"),
    );

    // activation against the scalar rule
    let mut act_ok = true;
    for _ in 0..50 {
        let c = rng.random_range(1..4usize);
        let x = random_real(Shape::new(1, c, 4, 4), &mut rng, -2.0, 2.0);
        let p = RpreluParams {
            gamma: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
            zeta: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
            slope: (0..c).map(|_| rng.random_range(-0.5..1.0)).collect(),
        };
        let out = rprelu(&x, &p)?;
        for b in 0..1 {
            for cc in 0..c {
                for i in 0..4 {
                    for j in 0..4 {
                        let v = x.get(b, cc, i, j);
                        let want = if v > p.gamma[cc] {
                            (v - p.gamma[cc]) + p.zeta[cc]
                        } else {
                            p.slope[cc] * (v - p.gamma[cc]) + p.zeta[cc]
                        };
                        act_ok &= out.get(b, cc, i, j) == want;
                    }
                }
            }
        }
    }
    report.push("rprelu", act_ok, "50/50 exact vs scalar rule".to_string());
    Ok(report)
}

/// Descriptor suite: wavelet conservation/reconstruction, descriptor
/// ranges and anchor values, gate range and permutation equivariance.
pub fn run_mabg() -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFACE);

    let mut energy_ok = true;
    let mut recon_ok = true;
    for _ in 0..50 {
        let shape = Shape::new(1, rng.random_range(1..4), 8, 8);
        let x = random_real(shape, &mut rng, -2.0, 2.0);
        let sb = haar_dwt(&x)?;
        let e_in: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let e_out: f64 = [&sb.ll, &sb.lh, &sb.hl, &sb.hh]
            .iter()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64).powi(2))
            .sum();
        energy_ok &= ((e_in - e_out) / e_in).abs() < 1e-5;
        let back = haar_idwt(&sb);
        recon_ok &= x.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-5);
    }
    report.push("dwt energy", energy_ok, "conserved to rel 1e-5 on 50 tensors");
    report.push("dwt inverse", recon_ok, "reconstructs to abs 1e-5 on 50 tensors");

    let mut range_ok = true;
    for _ in 0..50 {
        let shape = Shape::new(1, 3, rng.random_range(2..5) * 2, rng.random_range(2..5) * 2);
        let x = random_real(shape, &mut rng, -3.0, 3.0);
        let f = freq_descriptors(&subband_energies(&haar_dwt(&pad_to_even(&x))?));
        range_ok &= f.high_freq_ratio.iter().all(|&r| (0.0..=1.0 + 1e-6).contains(&r));
        range_ok &= f.orientation.iter().all(|&s| (0.5 - 1e-6..=1.0 + 1e-6).contains(&s));
    }
    report.push("descriptor ranges", range_ok, "r in [0,1], s in [0.5,1] on 50 tensors");

    let constant = FloatTensor::from_vec(Shape::new(1, 1, 8, 8), vec![0.4; 64]).unwrap();
    let r_const = descriptors(&constant).freq.high_freq_ratio[0];
    let mut checker = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            checker.push(if (i + j) % 2 == 0 { 1.0f32 } else { -1.0 });
        }
    }
    let nyquist = FloatTensor::from_vec(Shape::new(1, 1, 8, 8), checker).unwrap();
    let r_nyq = descriptors(&nyquist).freq.high_freq_ratio[0];
    report.push(
        "descriptor anchors",
        r_const == 0.0 && (r_nyq - 1.0).abs() < 1e-6,
        format!("r(constant) = {r_const}, r(checkerboard) = {r_nyq}"),
    );

    let mut gate_ok = true;
    let mut equiv_ok = true;
    for _ in 0..20 {
        let shape = Shape::new(1, 4, 6, 6);
        let x = random_real(shape, &mut rng, -1.0, 1.0);
        let head = GateHead {
            weight: [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ],
            bias: rng.random_range(-2.0..2.0),
        };
        let g = predict_gate(&x, &head);
        gate_ok &= g.values().iter().all(|&v| v > 0.0 && v < 1.0);

        let perm = [3usize, 1, 0, 2];
        let plane = 36;
        let mut pd = vec![0.0f32; shape.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            pd[dst * plane..(dst + 1) * plane]
                .copy_from_slice(&x.data()[src * plane..(src + 1) * plane]);
        }
        let gp = predict_gate(&FloatTensor::from_vec(shape, pd).unwrap(), &head);
        for (dst, &src) in perm.iter().enumerate() {
            equiv_ok &= gp.get(0, dst) == g.get(0, src);
        }
    }
    report.push("gate range", gate_ok, "strictly inside (0,1) on 20 heads");
    report.push("gate equivariance", equiv_ok, "exact under channel permutation");
    Ok(report)
}

/// Adapter suite: permutation algebra, block-diagonal equality, the
/// parameter-count law over 20 (c_in, c_out, divisor) combos.
pub fn run_sgra() -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xCAFE);

    let mut bij_ok = true;
    let mut inv_ok = true;
    for _ in 0..40 {
        let g = rng.random_range(1..7usize);
        let m = rng.random_range(1..7usize);
        let c = g * m;
        let perm = InterleavePerm::new(c, g)?;
        let mut seen = vec![false; c];
        for dst in 0..c {
            let src = perm.source_of(dst);
            bij_ok &= !seen[src];
            seen[src] = true;
        }
        let u = random_real(Shape::new(1, c, 3, 2), &mut rng, -1.0, 1.0);
        inv_ok &= interleave(&interleave(&u, g)?, m)? == u;
    }
    report.push("interleave bijection", bij_ok, "bijective on 40 (g,m) pairs");
    report.push("interleave inverse", inv_ok, "(g,m) pair inverts exactly on 40 cases");

    // block-diagonal embedding reproduces the partition projection exactly
    let mut block_ok = true;
    for _ in 0..20 {
        let g = rng.random_range(1..4usize);
        let c_in = g * rng.random_range(1..4usize);
        let c_out = g * rng.random_range(1..4usize);
        let stride = rng.random_range(1..3usize);
        let h = rng.random_range(3..7usize);
        let x = random_real(Shape::new(1, c_in, h, h), &mut rng, -1.0, 1.0);
        let w: Vec<f32> = (0..c_in * c_out / g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = SgraParams::new(c_in, c_out, g, stride, false, w)?;
        let u = partition_project(&x, &p)?;

        let (cin_g, cout_g) = (c_in / g, c_out / g);
        let mut dense = vec![0.0f32; c_out * c_in];
        for k in 0..g {
            for o in 0..cout_g {
                for i in 0..cin_g {
                    dense[(k * cout_g + o) * c_in + (k * cin_g + i)] =
                        p.weight[(k * cout_g + o) * cin_g + i];
                }
            }
        }
        let (h_out, w_out) = (h.div_ceil(stride), h.div_ceil(stride));
        'outer: for o in 0..c_out {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut acc = 0.0f64;
                    for c in 0..c_in {
                        acc += dense[o * c_in + c] as f64
                            * x.get(0, c, i * stride, j * stride) as f64;
                    }
                    if u.get(0, o, i, j) != acc as f32 {
                        block_ok = false;
                        break 'outer;
                    }
                }
            }
        }
    }
    report.push("partition projection", block_ok, "exact vs block-diagonal dense oracle, 20 cases");

    // parameter-count law over 20 combos, monotone toward the gcd
    let mut law_ok = true;
    let combos: [(usize, usize); 6] = [(64, 32), (48, 36), (32, 64), (16, 16), (24, 60), (40, 24)];
    let mut checked = 0usize;
    for (c_in, c_out) in combos {
        let g_full = choose_groups(c_in, c_out);
        let mut prev_params = usize::MAX;
        for d in [8usize, 4, 2, 1] {
            if g_full % d != 0 {
                continue;
            }
            let g = choose_groups_with_divisor(c_in, c_out, d)?;
            let params = c_in * c_out / g;
            law_ok &= params <= prev_params;
            law_ok &= params == c_in * c_out / (g_full / d);
            prev_params = params;
            checked += 1;
        }
    }
    report.push(
        "parameter-count law",
        law_ok && checked >= 20,
        format!("weights = c_in*c_out/g over {checked} (c_in,c_out,divisor) combos, monotone in g"),
    );
    Ok(report)
}

/// Gradient suite: every analytic gradient against central finite
/// differences of the f64 reference model.
pub fn run_grad() -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let checks = gradcheck::run_gradcheck(20250810)?;
    for c in &checks {
        report.push(
            format!("grad {}", c.name),
            c.failures == 0,
            format!(
                "{}/{} elements, max rel {:.2e} (fd {:.3e} vs analytic {:.3e})",
                c.checked, c.elements, c.max_rel, c.worst_fd, c.worst_analytic
            ),
        );
    }
    Ok(report)
}

/// Every suite in sequence.
pub fn run_all(opts: VerifyOptions) -> Result<SuiteReport> {
    let mut report = run_kernels(opts)?;
    report.merge(run_mabg()?);
    report.merge(run_sgra()?);
    report.merge(run_grad()?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_suite_passes_clean() {
        let report = run_kernels(VerifyOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn fault_injection_is_detected() {
        let report = run_kernels(VerifyOptions { inject_fault: true }).unwrap();
        assert!(!report.passed());
        let line = report.lines.iter().find(|l| l.name == "xnor_conv2d").unwrap();
        assert!(!line.pass);
    }

    #[test]
    fn mabg_and_sgra_suites_pass() {
        let m = run_mabg().unwrap();
        assert!(m.passed(), "{}", m.render());
        let s = run_sgra().unwrap();
        assert!(s.passed(), "{}", s.render());
    }
}
