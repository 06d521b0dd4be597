use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let first: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update. `grads[i]` belongs to `params[i]`;
    /// a missing gradient is an error rather than a silent skip.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        ensure!(
            params.len() == self.first.len() && grads.len() == params.len(),
            "optimizer tracks {} parameters, got {} params and {} grads",
            self.first.len(),
            params.len(),
            grads.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| {
                crate::Error::contract(format!("missing gradient for trainable parameter {i}"))
            })?;
            ensure!(
                p.dims() == g.dims() && p.dims() == self.first[i].dims(),
                "parameter {i} dims {:?} vs gradient {:?}",
                p.dims(),
                g.dims()
            );
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let g = g.expect("checked above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.1), &[&p]);
        let g = Tensor::zeros(&[3]);
        opt.adam_step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // Hand-applied update: m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g²,
        // p ← p − lr · g / (|g| + eps).
        let (p0, g0, lr) = (0.5f64, 0.2f64, 0.01f64);
        let expected = p0 - lr * g0 / (g0.abs() + 1e-8);

        let mut p = Tensor::scalar(p0 as f32);
        let g = Tensor::scalar(g0 as f32);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(lr as f32), &[&p]);
        opt.adam_step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.item() as f64 - expected).abs() < 1e-6, "{} vs {expected}", p.item());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = OptimizerState::new(AdamConfig::with_lr(0.1), &[&p]);
        assert!(opt.adam_step(&mut [&mut p], &[None]).is_err());
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
            let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-3), &[&p]);
            for k in 0..5 {
                let g = Tensor::new(vec![2], vec![0.1 * k as f32, -0.2]).unwrap();
                opt.adam_step(&mut [&mut p], &[Some(&g)]).unwrap();
            }
            (p, opt.first_moments()[0].clone(), opt.second_moments()[0].clone())
        };
        let (a, b) = (run(), run());
        assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
    }
}
