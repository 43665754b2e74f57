//! Adaptive moment estimation over named parameters, with support for
//! freezing parameter groups by name prefix.

use std::collections::BTreeMap;

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over all named parameters with gradients. Parameters whose
    /// name starts with any frozen prefix are skipped entirely (no data or
    /// moment update). Missing gradients are treated as zero contributions.
    pub fn step(&mut self, params: &[(String, Tensor)], frozen_prefixes: &[&str]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for (name, p) in params {
            if frozen_prefixes.iter().any(|f| name.starts_with(f)) {
                continue;
            }
            let Some(grad) = p.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::InvalidInput(format!(
                    "non-finite gradient in adam update of {name}"
                )));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            if mom.m.len() != grad.len() {
                return Err(TensorError::InvalidInput(format!(
                    "moment size mismatch for {name}: {} vs {}",
                    mom.m.len(),
                    grad.len()
                )));
            }
            let lr = self.cfg.learning_rate;
            let mut data = p.data();
            for i in 0..grad.len() {
                mom.m[i] = self.cfg.beta1 * mom.m[i] + (1.0 - self.cfg.beta1) * grad[i];
                mom.v[i] = self.cfg.beta2 * mom.v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                let m_hat = mom.m[i] / bias1;
                let v_hat = mom.v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.set_data(&data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_step(adam: &mut Adam, params: &[(String, Tensor)]) -> f64 {
        // loss = sum(x^2) over all params
        for (_, p) in params {
            p.zero_grad();
        }
        let mut loss = Tensor::scalar(0.0);
        for (_, p) in params {
            loss = loss.add(&p.mul(p).unwrap().sum_all()).unwrap();
        }
        let out = loss.item();
        loss.backward();
        adam.step(params, &[]).unwrap();
        out
    }

    #[test]
    fn quadratic_descends() {
        let x = Tensor::param(&[1, 3], vec![3.0, -2.0, 0.5]);
        let params = vec![("x".to_string(), x)];
        let mut adam = Adam::new(AdamConfig::new(0.1));
        let first = quad_step(&mut adam, &params);
        let mut last = first;
        for _ in 0..100 {
            last = quad_step(&mut adam, &params);
        }
        assert!(last < first * 0.01, "{last} vs {first}");
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_scale() {
        // with bias correction the first update is lr * sign(grad) (eps aside)
        let x = Tensor::param(&[1, 1], vec![5.0]);
        let params = vec![("x".to_string(), x.clone())];
        let mut adam = Adam::new(AdamConfig::new(0.01));
        x.zero_grad();
        let loss = x.scale(3.0).sum_all();
        loss.backward();
        adam.step(&params, &[]).unwrap();
        assert!((x.item() - (5.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn frozen_prefix_untouched() {
        let a = Tensor::param(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::param(&[1, 2], vec![3.0, 4.0]);
        let params = vec![("image.proj".to_string(), a.clone()), ("recipe.proj".to_string(), b.clone())];
        let mut adam = Adam::new(AdamConfig::new(0.1));
        for (_, p) in &params {
            p.zero_grad();
        }
        let loss = a.sum_all().add(&b.sum_all()).unwrap();
        loss.backward();
        adam.step(&params, &["image."]).unwrap();
        assert_eq!(a.data(), vec![1.0, 2.0]);
        assert_ne!(b.data(), vec![3.0, 4.0]);
        assert!(!adam.moments.contains_key("image.proj"));
    }

    #[test]
    fn nonfinite_gradient_is_error() {
        // log at 0 backpropagates an infinite gradient
        let x = Tensor::param(&[1, 1], vec![0.0]);
        let params = vec![("x".to_string(), x.clone())];
        x.zero_grad();
        x.log().sum_all().backward();
        let mut adam = Adam::new(AdamConfig::new(0.1));
        assert!(adam.step(&params, &[]).is_err());
    }
}
