use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0, "lr must be positive, got {}", self.lr);
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "momentum must lie in [0,1), got {}",
            self.momentum
        );
        ensure!(
            self.weight_decay >= 0.0,
            "weight_decay must be non-negative, got {}",
            self.weight_decay
        );
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    buffers: Vec<Vec<f32>>,
}

impl OptimizerState {
    /// Zero momentum buffers shaped like `params`.
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn from_buffers(config: SgdConfig, buffers: Vec<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, buffers })
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }

    /// One step at the configured learning rate.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        let lrs = vec![self.config.lr; params.len()];
        self.step_with_lrs(params, &lrs)
    }

    /// One step with a learning rate per parameter tensor:
    /// `g' = grad + wd·θ; v ← μ·v + g'; θ ← θ − lr·v`. Gradients are cleared.
    pub fn step_with_lrs(&mut self, params: &mut [Tensor], lrs: &[f32]) -> Result<()> {
        ensure!(
            params.len() == self.buffers.len() && lrs.len() == params.len(),
            "optimizer tracks {} buffers but got {} parameters and {} learning rates",
            self.buffers.len(),
            params.len(),
            lrs.len()
        );
        for (i, p) in params.iter().enumerate() {
            ensure!(
                p.grad().is_some(),
                "parameter {i} has no gradient; run backward first"
            );
            ensure!(
                self.buffers[i].len() == p.numel(),
                "momentum buffer {i} does not match its parameter"
            );
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, v), &lr) in params.iter_mut().zip(&mut self.buffers).zip(lrs) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((theta, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                let g = g + weight_decay * *theta;
                *vel = momentum * *vel + g;
                *theta -= lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`.
/// Steps past the end clamp to `min_lr`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f32, min_lr: f32) -> f32 {
    if total_steps == 0 || step >= total_steps {
        return min_lr;
    }
    let t = step as f64 / total_steps as f64;
    let lr = min_lr as f64 + 0.5 * (base_lr - min_lr) as f64 * (1.0 + (std::f64::consts::PI * t).cos());
    lr as f32
}
