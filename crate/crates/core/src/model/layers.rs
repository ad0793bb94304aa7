use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::Bound;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Additive score for masked attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// One forward pass: the graph, bound parameters, and an optional dropout
/// generator. Dropout is active only when a generator is present.
pub struct Ctx<'a, S: Scalar> {
    pub g: &'a mut Graph<S>,
    pub params: &'a Bound,
    pub config: &'a ModelConfig,
    rng: Option<&'a mut ChaCha8Rng>,
    /// Attention probabilities `[H, B, Lq, Lk]` of every attention call, tagged by parameter prefix.
    pub attention: Vec<(String, Var)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(g: &'a mut Graph<S>, params: &'a Bound, config: &'a ModelConfig, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            g,
            params,
            config,
            rng,
            attention: Vec::new(),
        }
    }

    pub fn p(&self, name: &str) -> Var {
        self.params[name]
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => self.g.dropout(x, self.config.dropout, rng),
            _ => x,
        }
    }

    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.g.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.gain"));
        let bias = self.p(&format!("{prefix}.bias"));
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let x = self.g.reshape(x, &[s[0], s[1], h, dh])?;
        self.g.permute(x, &[2, 0, 1, 3])
    }

    /// Multi-head attention of `query` `[B, Lq, d]` over `memory` `[B, Lk, d]`.
    /// `mask` is an additive `[B, Lq, Lk]` constant.
    pub fn attention(&mut self, prefix: &str, query: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let s = self.g.shape(query).to_vec();
        let (b, lq, d) = (s[0], s[1], s[2]);
        let q = self.linear(&format!("{prefix}.q"), query)?;
        let k = self.linear(&format!("{prefix}.k"), memory)?;
        let v = self.linear(&format!("{prefix}.v"), memory)?;
        let q = self.split_heads(q)?;
        let k = self.split_heads(k)?;
        let v = self.split_heads(v)?;
        let kt = self.g.transpose(k)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, S::from_f64(1.0 / (self.config.head_dim() as f64).sqrt()));
        let scores = match mask {
            Some(m) => self.g.add(scores, m)?,
            None => scores,
        };
        let probs = self.g.softmax(scores, 3)?;
        self.attention.push((prefix.to_string(), probs));
        let out = self.g.matmul(probs, v)?;
        let out = self.g.permute(out, &[1, 2, 0, 3])?;
        let out = self.g.reshape(out, &[b, lq, d])?;
        self.linear(&format!("{prefix}.o"), out)
    }

    pub fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.g.relu(h);
        self.linear(&format!("{prefix}.fc2"), h)
    }

    /// `LN(x + drop(sublayer))`.
    fn residual(&mut self, ln: &str, x: Var, sub: Var) -> Result<Var> {
        let sub = self.dropout(sub);
        let y = self.g.add(x, sub)?;
        self.layer_norm(ln, y)
    }

    /// Post-norm layer where `x` attends over `memory` (itself for self-attention).
    pub fn encoder_layer(&mut self, prefix: &str, x: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let a = self.attention(&format!("{prefix}.attn"), x, memory, mask)?;
        let x = self.residual(&format!("{prefix}.ln1"), x, a)?;
        let f = self.ffn(&format!("{prefix}.ffn"), x)?;
        self.residual(&format!("{prefix}.ln2"), x, f)
    }

    pub fn decoder_layer(
        &mut self,
        prefix: &str,
        x: Var,
        memory: Var,
        self_mask: Var,
        memory_mask: Option<Var>,
    ) -> Result<Var> {
        let a = self.attention(&format!("{prefix}.self_attn"), x, x, Some(self_mask))?;
        let x = self.residual(&format!("{prefix}.ln1"), x, a)?;
        let c = self.attention(&format!("{prefix}.cross_attn"), x, memory, memory_mask)?;
        let x = self.residual(&format!("{prefix}.ln2"), x, c)?;
        let f = self.ffn(&format!("{prefix}.ffn"), x)?;
        self.residual(&format!("{prefix}.ln3"), x, f)
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positions<S: Scalar>(len: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(S::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

/// Additive mask `[B, Lq, Lk]` hiding keys at or beyond each row's length,
/// and future keys when `causal`.
pub fn attention_mask<S: Scalar>(lq: usize, key_lens: &[usize], lk: usize, causal: bool) -> Tensor<S> {
    let masked = S::from_f64(MASK_VALUE);
    let mut data = vec![S::zero(); key_lens.len() * lq * lk];
    for (b, &len) in key_lens.iter().enumerate() {
        for q in 0..lq {
            for k in 0..lk {
                if k >= len || (causal && k > q) {
                    data[(b * lq + q) * lk + k] = masked;
                }
            }
        }
    }
    Tensor::new(vec![key_lens.len(), lq, lk], data).expect("mask shape")
}
