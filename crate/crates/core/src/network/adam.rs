use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; the update is
/// `p -= lr · m̂ / (sqrt(v̂) + eps)`.
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    params: Vec<(String, Var)>,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: &[(String, Var)], config: AdamConfig) -> Result<Self> {
        let moments = params
            .iter()
            .map(|(_, v)| Ok((v.zeros_like()?, v.zeros_like()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            steps: 0,
            params: params.to_vec(),
            moments,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to every parameter that has a gradient in `grads`.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for ((_, var), (m, v)) in self.params.iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            *m = ((&*m * beta1)? + (g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn named_state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .zip(&self.moments)
            .flat_map(|((name, _), (m, v))| {
                [
                    (format!("{prefix}m.{name}"), m.clone()),
                    (format!("{prefix}v.{name}"), v.clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str, steps: u64) -> Result<()> {
        for ((name, var), (m, v)) in self.params.iter().zip(self.moments.iter_mut()) {
            for (slot, which) in [(&mut *m, "m"), (&mut *v, "v")] {
                let key = format!("{prefix}{which}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = Var::new(&[1.0f64, -2.0, 3.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(&[("p".into(), p.clone())], AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let loss = (p.as_tensor() * &Tensor::new(&[2.0f64, -3.0, 0.5], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = p.to_vec1::<f64>().unwrap();
        for (g, e) in got.iter().zip([0.9, -1.9, 2.9]) {
            assert!((g - e).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Var::new(&[5.0f64, -4.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(&[("p".into(), p.clone())], AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() }).unwrap();
        for _ in 0..2000 {
            let loss = p.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(p.to_vec1::<f64>().unwrap().iter().all(|v| v.abs() < 1e-2));
    }
}
