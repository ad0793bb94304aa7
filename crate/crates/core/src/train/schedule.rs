use serde::{Deserialize, Serialize};

/// Optimizer and loop hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_init: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub max_tokens: usize,
    pub seed: u64,
    /// Global gradient-norm clipping; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            lr_init: 1e-7,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            epochs: 30,
            max_steps: None,
            max_tokens: 4096,
            seed: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Linear warmup from `lr_init` at step 1 to `lr_peak` at `warmup_steps`,
    /// then `lr_peak·√(warmup/step)`. Step 0 is treated as step 1.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1);
        let w = self.warmup_steps.max(1);
        if s < w {
            let frac = (s - 1) as f64 / (w - 1) as f64;
            self.lr_init + (self.lr_peak - self.lr_init) * frac
        } else {
            self.lr_peak * (w as f64 / s as f64).sqrt()
        }
    }
}
