//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl AdamWConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers and step counter for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Step counter and first/second moment buffers, one per parameter.
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn from_state(config: AdamWConfig, step: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.len() != v.len()) {
            return Err(Error::contract("moment buffers disagree in shape"));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    /// Applies one update using each parameter's accumulated gradient.
    /// Gradients are left in place.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.len())
        {
            return Err(Error::contract("parameter set changed shape between optimizer steps"));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - (c.beta1 as f64).powi(self.step as i32);
        let bias2 = 1.0 - (c.beta2 as f64).powi(self.step as i32);
        let step_size = (c.lr as f64 / bias1) as f32;
        let bias2_sqrt = bias2.sqrt() as f32;
        let decay = 1.0 - c.lr * c.weight_decay;
        for (idx, (_, p)) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                *w *= decay;
                *w -= step_size * m[j] / (v[j].sqrt() / bias2_sqrt + c.eps);
            }
        }
        Ok(())
    }
}
