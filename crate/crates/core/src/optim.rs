//! Adam with bias correction and the cyclic cosine learning-rate schedule.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::net::Network;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Default)]
pub struct OptimState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update over every gradient entry. Parameters without a
    /// gradient are left untouched; non-finite gradients abort with the
    /// offending tensor's name.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: self.step,
                    details: format!("non-finite gradient in {name}"),
                });
            }
            let param = net
                .param_slice_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
            }
        }
        Ok(())
    }
}

/// Cyclic cosine annealing: `lr(k) = lr_max · (1 + cos(π (k mod T)/T)) / 2`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub period: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, period: u64) -> Self {
        LrSchedule { lr_max, period: period.max(1) }
    }

    pub fn lr_at(&self, k: u64) -> f64 {
        let phase = (k % self.period) as f64 / self.period as f64;
        self.lr_max * (1.0 + (std::f64::consts::PI * phase).cos()) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetworkConfig};

    fn tiny_net() -> Network {
        build_network(
            &NetworkConfig { scales: 1, base_channels: 4, blocks_per_scale: 1, ..Default::default() },
            1,
        )
        .unwrap()
    }

    fn grad_for(net: &Network, name: &str, value: f32) -> Gradients {
        let mut g = Gradients::new();
        let n = net.param_slice(name).unwrap().len();
        g.add(name, vec![value; n]);
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut net = tiny_net();
        let before = net.param_checksum();
        let g = grad_for(&net, "enc0_b0.threshold", 0.0);
        OptimState::new().step(&mut net, &g, 1e-3).unwrap();
        assert_eq!(net.param_checksum(), before);
    }

    #[test]
    fn first_step_magnitude_is_almost_lr() {
        // fresh state, g = 1: bias-corrected m̂ = 1, v̂ = 1, so the update
        // is lr / (1 + ε)
        let mut net = tiny_net();
        let name = "enc0_b0.rprelu.zeta";
        let before = net.param_slice(name).unwrap()[0];
        let g = grad_for(&net, name, 1.0);
        let lr = 1e-3;
        OptimState::new().step(&mut net, &g, lr).unwrap();
        let after = net.param_slice(name).unwrap()[0];
        let want = before as f64 - lr / (1.0 + ADAM_EPS);
        assert!(((after as f64 - want) / lr).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_reaches_sign_descent_limit() {
        let mut net = tiny_net();
        let name = "enc0_b0.rprelu.zeta";
        let lr = 1e-4;
        let mut opt = OptimState::new();
        let g = grad_for(&net, name, 0.7);
        let mut prev = net.param_slice(name).unwrap()[0] as f64;
        let mut last_delta = 0.0f64;
        for _ in 0..10_000 {
            opt.step(&mut net, &g, lr).unwrap();
            let cur = net.param_slice(name).unwrap()[0] as f64;
            last_delta = prev - cur;
            prev = cur;
        }
        assert!(
            (last_delta - lr).abs() / lr < 0.01,
            "terminal step {last_delta} vs lr {lr}"
        );
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut net = tiny_net();
        let g = grad_for(&net, "enc0_b0.threshold", f32::NAN);
        let err = OptimState::new().step(&mut net, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains("enc0_b0.threshold"), "{err}");
    }

    #[test]
    fn update_commutes_with_parameter_permutation() {
        // per-parameter independence: permuting the elements of one tensor
        // and its gradient permutes the update identically
        let mut a = tiny_net();
        let mut b = tiny_net();
        let name = "enc0_b0.weight";
        let n = a.param_slice(name).unwrap().len();
        let perm: Vec<usize> = (0..n).rev().collect();
        {
            let src = a.param_slice(name).unwrap().to_vec();
            let dst = b.param_slice_mut(name).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                dst[i] = src[p];
            }
        }
        let gvals: Vec<f32> = (0..n).map(|i| (i as f32 * 0.013).sin()).collect();
        let mut ga = Gradients::new();
        ga.add(name, gvals.clone());
        let mut gb = Gradients::new();
        gb.add(name, perm.iter().map(|&p| gvals[p]).collect());
        OptimState::new().step(&mut a, &ga, 2e-3).unwrap();
        OptimState::new().step(&mut b, &gb, 2e-3).unwrap();
        let ua = a.param_slice(name).unwrap();
        let ub = b.param_slice(name).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(ub[i], ua[p]);
        }
        // clipped-STE masking commutes the same way
        let w = crate::tensor::FloatTensor::from_vec(
            crate::tensor::Shape::new(1, 1, 1, 4),
            vec![0.5, -1.5, 2.0, 0.9],
        )
        .unwrap();
        let g = crate::tensor::FloatTensor::from_vec(
            crate::tensor::Shape::new(1, 1, 1, 4),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let masked = crate::autograd::ste_weight_backward(&g, &w).unwrap();
        let wp = crate::tensor::FloatTensor::from_vec(
            crate::tensor::Shape::new(1, 1, 1, 4),
            vec![0.9, 2.0, -1.5, 0.5],
        )
        .unwrap();
        let gp = crate::tensor::FloatTensor::from_vec(
            crate::tensor::Shape::new(1, 1, 1, 4),
            vec![4.0, 3.0, 2.0, 1.0],
        )
        .unwrap();
        let masked_p = crate::autograd::ste_weight_backward(&gp, &wp).unwrap();
        let rev: Vec<f32> = masked.data().iter().rev().copied().collect();
        assert_eq!(masked_p.data(), rev.as_slice());
    }

    #[test]
    fn schedule_endpoints_and_periodicity() {
        let sched = LrSchedule::new(2e-4, 100);
        assert_eq!(sched.lr_at(0), 2e-4);
        assert!((sched.lr_at(50) - 1e-4).abs() < 1e-18);
        assert_eq!(sched.lr_at(100), 2e-4);
        assert_eq!(sched.lr_at(237), sched.lr_at(37));
        // monotone decrease within a cycle
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let lr = sched.lr_at(k);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
