use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are desk scale; the published
/// setup uses 6 encoder and 6 decoder layers with 12 heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    /// Width of the incoming visual tokens.
    pub d_v: usize,
    pub vocab_size: usize,
    /// Self-attention layers applied separately to text and prompts before co-attention.
    pub n_fuse_layers: usize,
    pub n_coattn_layers: usize,
    /// Hidden width of the controller network.
    pub d_ctrl: usize,
    /// Prompt strategy name, see [`StrategyRegistry`](super::StrategyRegistry).
    pub variant: String,
    pub dropout: f64,
    pub eps_ls: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 4 * 96,
            d_v: 32,
            vocab_size: 0,
            n_fuse_layers: 1,
            n_coattn_layers: 1,
            d_ctrl: 96,
            variant: "full".to_string(),
            dropout: 0.3,
            eps_ls: 0.1,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    /// Sets `d_model` along with the widths derived from it (`d_ffn = 4·d`, `d_ctrl = d`).
    pub fn with_d_model(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.d_ffn = 4 * d_model;
        self.d_ctrl = d_model;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Length of the controller output: a `d_v × d_model` weight followed by a `d_model` bias.
    pub fn controller_out(&self) -> usize {
        self.d_v * self.d_model + self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_ffn == 0 || self.d_ctrl == 0 {
            return fail("d_ffn and d_ctrl must be positive".into());
        }
        if self.d_v == 0 && self.variant != "text_only" {
            return fail(format!("d_v must be positive for variant `{}`", self.variant));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.eps_ls) {
            return fail("dropout and eps_ls must lie in [0, 1)".into());
        }
        if self.n_coattn_layers == 0 && self.variant != "text_only" {
            return fail("at least one co-attention layer is required".into());
        }
        Ok(())
    }
}
