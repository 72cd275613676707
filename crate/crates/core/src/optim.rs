//! Adam with bias correction, global gradient-norm clipping, and the
//! linear-warmup + cosine-annealing learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// First/second moment buffers per parameter path plus the step counter.
#[derive(Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// One bias-corrected update over aligned (path, value) / (path, grad)
    /// lists. Returns the updated parameter tensors in the same order.
    pub fn step(
        &mut self,
        params: &[(String, Tensor)],
        grads: &[(String, Tensor)],
        lr: f64,
    ) -> Result<Vec<(String, Tensor)>> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for ((path, p), (gpath, grad)) in params.iter().zip(grads) {
            if path != gpath || p.shape() != grad.shape() {
                return Err(Error::contract(format!(
                    "adam: misaligned entries {path} vs {gpath}"
                )));
            }
            let slot = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            if slot.0.len() != p.len() {
                return Err(Error::contract(format!(
                    "adam: moment buffer for {path} has stale size"
                )));
            }
            let mut new = p.data().to_vec();
            for i in 0..new.len() {
                let gi = grad.data()[i];
                slot.0[i] = self.beta1 * slot.0[i] + (1.0 - self.beta1) * gi;
                slot.1[i] = self.beta2 * slot.1[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.0[i] / bc1;
                let vhat = slot.1[i] / bc2;
                new[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            out.push((path.clone(), Tensor::from_vec(p.shape().to_vec(), new)));
        }
        Ok(out)
    }
}

/// Scale gradients in place so the global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.iter() {
        sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            let scaled: Vec<f64> = g.data().iter().map(|v| v * s).collect();
            *g = Tensor::from_vec(g.shape().to_vec(), scaled);
        }
    }
    norm
}

/// Linear warmup to lr_max over the first `warmup_fraction` of steps, then
/// cosine annealing to zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn new(lr_max: f64, total_steps: usize, warmup_fraction: f64) -> Self {
        Schedule {
            lr_max,
            total_steps,
            warmup_fraction,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_fraction).round() as usize)
            .clamp(1, self.total_steps.max(1))
    }

    /// Learning rate at a 1-based step index. lr(warmup) = lr_max exactly;
    /// lr(total) = 0.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        let step = step.min(self.total_steps);
        if step <= w {
            return self.lr_max * step as f64 / w as f64;
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{collect_grads, collect_params, load_params};

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::default();
        let p = vec![("w".to_string(), Tensor::from_vec(vec![3], vec![1., 2., 3.]))];
        let g = vec![("w".to_string(), Tensor::zeros(&[3]))];
        let out = adam.step(&p, &g, 0.1).unwrap();
        assert_eq!(out[0].1.data(), &[1., 2., 3.]);
    }

    #[test]
    fn quadratic_convergence() {
        // minimize (w - 3)^2 with analytic gradient 2(w - 3)
        let mut adam = Adam::default();
        let mut w = 0.0f64;
        for _ in 0..2000 {
            let p = vec![("w".to_string(), Tensor::scalar(w))];
            let g = vec![("w".to_string(), Tensor::scalar(2.0 * (w - 3.0)))];
            w = adam.step(&p, &g, 0.05).unwrap()[0].1.item();
        }
        assert!((w - 3.0).abs() < 1e-3, "w = {w}");
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut adam = Adam::default();
            let mut w = vec![0.5, -0.5];
            for s in 0..50 {
                let p = vec![(
                    "w".to_string(),
                    Tensor::from_vec(vec![2], w.clone()),
                )];
                let g = vec![(
                    "w".to_string(),
                    Tensor::from_vec(vec![2], vec![(s as f64).sin(), (s as f64).cos()]),
                )];
                w = adam.step(&p, &g, 0.01).unwrap()[0].1.data().to_vec();
            }
            w
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![
            ("a".to_string(), Tensor::from_vec(vec![2], vec![3.0, 0.0])),
            ("b".to_string(), Tensor::from_vec(vec![1], vec![4.0])),
        ];
        let pre = clip_grad_norm(&mut grads, 5.0);
        assert!((pre - 5.0).abs() < 1e-12); // norm exactly 5, no clip
        let mut grads = vec![("a".to_string(), Tensor::from_vec(vec![2], vec![6.0, 8.0]))];
        let pre = clip_grad_norm(&mut grads, 5.0);
        assert!((pre - 10.0).abs() < 1e-12);
        let post: f64 = grads[0].1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((post - 5.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let sched = Schedule::new(2e-4, 1000, 0.05);
        assert_eq!(sched.warmup_steps(), 50);
        assert_eq!(sched.lr_at(50), 2e-4);
        assert!(sched.lr_at(1000).abs() < 1e-12);
        // continuity at the boundary
        let before = sched.lr_at(50);
        let after = sched.lr_at(51);
        assert!((before - after).abs() < 2e-4 * 0.01);
        // cosine midpoint: warmup + half the remainder -> lr_max / 2
        let mid = 50 + (1000 - 50) / 2;
        assert!((sched.lr_at(mid) - 1e-4).abs() < 1e-9);
        // ramp: lr(1) = lr_max / warmup_steps
        assert!((sched.lr_at(1) - 2e-4 / 50.0).abs() < 1e-18);
    }

    #[test]
    fn visitor_round_trip_with_adam() {
        // params updated through the module visitors stay aligned
        use crate::nn::Linear;
        use crate::tensor::Graph;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut lin = Linear::init(&mut rng, 3, 2, true);
        let g = Graph::new();
        crate::nn::attach_params(&mut lin, &g);
        let x = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let y = lin.forward(&g, &x).unwrap();
        let loss = g.sum_all(&g.mul(&y, &y).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        let gvec = collect_grads(&mut lin, &grads).unwrap();
        let pvec = collect_params(&mut lin);
        let mut adam = Adam::default();
        let updated = adam.step(&pvec, &gvec, 1e-2).unwrap();
        let map: BTreeMap<String, Tensor> = updated.into_iter().collect();
        let missing = load_params(&mut lin, &map);
        assert!(missing.is_empty());
        let after = collect_params(&mut lin);
        assert_ne!(after[0].1.data(), pvec[0].1.data());
    }
}
