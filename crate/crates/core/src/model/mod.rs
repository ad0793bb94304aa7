//! The translation network: a post-norm Transformer encoder-decoder whose
//! decoder attends over source states fused with visual prompts.
//!
//! The source (tag-prefixed) is encoded to `S0`. Visual tokens are mapped
//! to prompts `P0` by the configured [`PromptStrategy`]. Text and prompts
//! each pass through their own self-attention stack, then co-attention lets
//! text query the prompts to form the decoder memory `Q`. Under
//! `text_only` the memory is `S0` itself.

pub mod checkpoint;
mod config;
mod layers;
mod params;
mod prompt;

#[cfg(test)]
mod tests;

pub use checkpoint::{Checkpoint, OptimizerSection};
pub use config::ModelConfig;
pub use layers::{attention_mask, positions, Ctx, LN_EPS, MASK_VALUE};
pub use params::{Bound, Init, ParamSpec, ParamSpecs, ParamStore};
pub use prompt::{
    DirectProjection, LanguageAware, PromptStrategy, StaticMapping, StrategyCtor, StrategyRegistry, TextOnly,
};

use crate::autodiff::{grad_check_many, GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::text::{ParallelExample, PAD};
use crate::vision::VtokFile;

/// Token ids and visual tokens for one training or evaluation batch.
#[derive(Clone, Debug)]
pub struct ModelBatch<S: Scalar> {
    /// Tag-prefixed sources; the first id of each row is its target tag.
    pub src: Vec<Vec<u32>>,
    pub tgt_in: Vec<Vec<u32>>,
    pub tgt_out: Vec<Vec<u32>>,
    /// `[B, M_v, d_v]`.
    pub visual: Option<Tensor<S>>,
}

impl<S: Scalar> ModelBatch<S> {
    pub fn from_examples(examples: &[&ParallelExample], vtok: Option<&VtokFile>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let visual = match vtok {
            Some(file) => {
                let mut data = Vec::with_capacity(examples.len() * file.m_v * file.d_v);
                for ex in examples {
                    data.extend(file.get(&ex.image_id)?.tokens.data().iter().map(|&x| S::from_f64(x as f64)));
                }
                Some(Tensor::new(vec![examples.len(), file.m_v, file.d_v], data)?)
            }
            None => None,
        };
        Ok(Self {
            src: examples.iter().map(|e| e.source_ids.clone()).collect(),
            tgt_in: examples.iter().map(|e| e.decoder_input()).collect(),
            tgt_out: examples.iter().map(|e| e.target_ids.clone()).collect(),
            visual,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Right-pads rows with `PAD`; returns the flat ids, row lengths and width.
pub fn pad_rows(rows: &[Vec<u32>]) -> (Vec<usize>, Vec<usize>, usize) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        flat.extend(r.iter().map(|&t| t as usize));
        flat.extend(std::iter::repeat_n(PAD as usize, width - r.len()));
    }
    (flat, rows.iter().map(Vec::len).collect(), width)
}

pub struct LvpM3Model<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
    strategy: Box<dyn PromptStrategy<S>>,
}

impl<S: Scalar> std::fmt::Debug for LvpM3Model<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LvpM3Model")
            .field("variant", &self.strategy.name())
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

/// Parameters shared by every variant.
fn declare_backbone(c: &ModelConfig, uses_vision: bool, specs: &mut ParamSpecs) {
    let embed_bound = (3.0 / c.d_model as f64).sqrt();
    specs.add("embed.weight", &[c.vocab_size, c.d_model], Init::Uniform(embed_bound));
    for i in 0..c.n_enc_layers {
        specs.encoder_layer(&format!("enc.{i}"), c.d_model, c.d_ffn);
    }
    if uses_vision {
        for i in 0..c.n_fuse_layers {
            specs.encoder_layer(&format!("fuse.text.{i}"), c.d_model, c.d_ffn);
            specs.encoder_layer(&format!("fuse.vis.{i}"), c.d_model, c.d_ffn);
        }
        for i in 0..c.n_coattn_layers {
            specs.cross_layer(&format!("coattn.{i}"), c.d_model, c.d_ffn);
        }
    }
    for i in 0..c.n_dec_layers {
        specs.decoder_layer(&format!("dec.{i}"), c.d_model, c.d_ffn);
    }
}

impl<S: Scalar> LvpM3Model<S> {
    /// Builds a freshly initialized model using the built-in strategies.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_registry(config, &StrategyRegistry::builtin())
    }

    pub fn with_registry(config: ModelConfig, registry: &StrategyRegistry<S>) -> Result<Self> {
        config.validate()?;
        let strategy = registry.create(&config.variant)?;
        let specs = Self::specs_for(&config, strategy.as_ref());
        let params = specs.materialize(config.init_seed)?;
        Ok(Self {
            config,
            params,
            strategy,
        })
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let strategy = StrategyRegistry::builtin().create(&config.variant)?;
        Self::specs_for(&config, strategy.as_ref()).check(&params)?;
        Ok(Self {
            config,
            params,
            strategy,
        })
    }

    fn specs_for(config: &ModelConfig, strategy: &dyn PromptStrategy<S>) -> ParamSpecs {
        let mut specs = ParamSpecs::default();
        declare_backbone(config, strategy.uses_vision(), &mut specs);
        strategy.declare(config, &mut specs);
        specs
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn variant(&self) -> &'static str {
        self.strategy.name()
    }

    pub fn uses_vision(&self) -> bool {
        self.strategy.uses_vision()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Result<LvpM3Model<T>> {
        let params = self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        LvpM3Model::from_params(self.config.clone(), params)
    }

    /// Places every parameter on `g`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        Bound::new(g, &self.params, trainable)
    }

    /// Token embedding scaled by `√d` plus positions, then dropout: `[B, L, d]`.
    fn embed(&self, ctx: &mut Ctx<'_, S>, rows: &[Vec<u32>]) -> Result<(Var, Vec<usize>)> {
        let (flat, lens, width) = pad_rows(rows);
        let d = self.config.d_model;
        let table = ctx.p("embed.weight");
        let e = ctx.g.embedding(table, &flat)?;
        let e = ctx.g.reshape(e, &[rows.len(), width, d])?;
        let e = ctx.g.scale(e, S::from_f64((d as f64).sqrt()));
        let pos = ctx.g.constant(positions(width, d));
        let e = ctx.g.add(e, pos)?;
        Ok((ctx.dropout(e), lens))
    }

    fn key_mask(&self, ctx: &mut Ctx<'_, S>, lq: usize, key_lens: &[usize], causal: bool) -> Var {
        let lk = key_lens.iter().copied().max().unwrap_or(0);
        let lk = if causal { lq } else { lk };
        ctx.g.constant(attention_mask(lq, key_lens, lk, causal))
    }

    /// Encodes tag-prefixed sources to `S0` `[B, Ls, d]`.
    pub fn encode_source(&self, ctx: &mut Ctx<'_, S>, src: &[Vec<u32>]) -> Result<Var> {
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::Empty("source"));
        }
        let (mut x, lens) = self.embed(ctx, src)?;
        let width = ctx.g.shape(x)[1];
        let mask = self.key_mask(ctx, width, &lens, false);
        for i in 0..self.config.n_enc_layers {
            x = ctx.encoder_layer(&format!("enc.{i}"), x, x, Some(mask))?;
        }
        Ok(x)
    }

    /// Visual prompts `P0` `[B, M_v, d]` from visual tokens and target tags.
    pub fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, tag_ids: &[usize]) -> Result<Var> {
        let shape = ctx.g.shape(visual).to_vec();
        if shape.len() != 3 || shape[0] != tag_ids.len() || shape[2] != self.config.d_v {
            return Err(Error::shape(
                "prompts",
                &shape,
                &[tag_ids.len(), shape.get(1).copied().unwrap_or(0), self.config.d_v],
            ));
        }
        self.strategy.prompts(ctx, visual, tag_ids)
    }

    /// Controller output `(W [B, d_v, d], b [B, d])`; only under `full`.
    pub fn controller_forward(&self, ctx: &mut Ctx<'_, S>, tag_ids: &[usize]) -> Result<(Var, Var)> {
        self.require("controller_forward", "full")?;
        LanguageAware::controller_forward(ctx, tag_ids)
    }

    fn require(&self, op: &'static str, variant: &str) -> Result<()> {
        if self.variant() != variant {
            return Err(Error::Variant {
                op,
                variant: self.variant().to_string(),
            });
        }
        Ok(())
    }

    /// Separate self-attention over text (masked by source length) and prompts.
    pub fn self_fuse(&self, ctx: &mut Ctx<'_, S>, s0: Var, p0: Var, src_lens: &[usize]) -> Result<(Var, Var)> {
        if !self.uses_vision() {
            return Err(Error::Variant {
                op: "self_fuse",
                variant: self.variant().to_string(),
            });
        }
        let width = ctx.g.shape(s0)[1];
        let mask = self.key_mask(ctx, width, src_lens, false);
        let (mut s, mut p) = (s0, p0);
        for i in 0..self.config.n_fuse_layers {
            s = ctx.encoder_layer(&format!("fuse.text.{i}"), s, s, Some(mask))?;
            p = ctx.encoder_layer(&format!("fuse.vis.{i}"), p, p, None)?;
        }
        Ok((s, p))
    }

    /// Text queries attend over prompts: `Q` `[B, Ls, d]`.
    pub fn co_attention(&self, ctx: &mut Ctx<'_, S>, s: Var, p: Var) -> Result<Var> {
        let mut q = s;
        for i in 0..self.config.n_coattn_layers {
            q = ctx.encoder_layer(&format!("coattn.{i}"), q, p, None)?;
        }
        Ok(q)
    }

    /// Full source-side pipeline producing the decoder memory.
    pub fn memory(&self, ctx: &mut Ctx<'_, S>, src: &[Vec<u32>], visual: Option<&Tensor<S>>) -> Result<Var> {
        let s0 = self.encode_source(ctx, src)?;
        if !self.uses_vision() {
            return Ok(s0);
        }
        let visual = visual.ok_or_else(|| {
            Error::Config(format!("variant `{}` requires visual tokens", self.variant()))
        })?;
        let v = ctx.g.constant(visual.clone());
        let tags: Vec<usize> = src.iter().map(|r| r[0] as usize).collect();
        let p0 = self.prompts(ctx, v, &tags)?;
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let (s, p) = self.self_fuse(ctx, s0, p0, &lens)?;
        self.co_attention(ctx, s, p)
    }

    /// Decoder logits `[B, Lt, V]` for BOS-started inputs. The output
    /// projection shares the embedding table.
    pub fn decode(&self, ctx: &mut Ctx<'_, S>, memory: Var, src_lens: &[usize], tgt_in: &[Vec<u32>]) -> Result<Var> {
        if tgt_in.iter().any(Vec::is_empty) {
            return Err(Error::Empty("decoder input"));
        }
        let (mut y, lens) = self.embed(ctx, tgt_in)?;
        let lt = ctx.g.shape(y)[1];
        let self_mask = self.key_mask(ctx, lt, &lens, true);
        let mem_mask = self.key_mask(ctx, lt, src_lens, false);
        for i in 0..self.config.n_dec_layers {
            y = ctx.decoder_layer(&format!("dec.{i}"), y, memory, self_mask, Some(mem_mask))?;
        }
        let table = ctx.p("embed.weight");
        let out = ctx.g.transpose(table)?;
        ctx.g.matmul(y, out)
    }

    /// Label-smoothed cross entropy over non-pad target positions.
    pub fn forward_loss(&self, ctx: &mut Ctx<'_, S>, batch: &ModelBatch<S>) -> Result<Var> {
        let memory = self.memory(ctx, &batch.src, batch.visual.as_ref())?;
        let src_lens: Vec<usize> = batch.src.iter().map(Vec::len).collect();
        let logits = self.decode(ctx, memory, &src_lens, &batch.tgt_in)?;
        let shape = ctx.g.shape(logits).to_vec();
        let (targets, _, width) = pad_rows(&batch.tgt_out);
        if width != shape[1] {
            return Err(Error::shape("forward_loss", &shape, &[batch.len(), width]));
        }
        let flat = ctx.g.reshape(logits, &[shape[0] * shape[1], shape[2]])?;
        ctx.g.cross_entropy_label_smoothed(flat, &targets, self.config.eps_ls, PAD as usize)
    }

    /// Runs the source side once for decoding.
    pub fn encode_for_decoding(&self, src: &[u32], visual: Option<&Tensor<S>>) -> Result<EncodedSource<S>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut ctx = Ctx::new(&mut g, &bound, &self.config, None);
        let visual = match visual {
            Some(v) if v.rank() == 2 => Some(v.clone().reshape(&[1, v.shape()[0], v.shape()[1]])?),
            other => other.cloned(),
        };
        let memory = self.memory(&mut ctx, &[src.to_vec()], visual.as_ref())?;
        Ok(EncodedSource {
            memory: g.value(memory).clone(),
            src_len: src.len(),
        })
    }

    /// Log-probabilities over the vocabulary for the token following each
    /// prefix. Every prefix must have the same length.
    pub fn next_log_probs(&self, encoded: &EncodedSource<S>, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let t = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != t) {
            return Err(Error::Config("prefixes must share one length".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let mut ctx = Ctx::new(&mut g, &bound, &self.config, None);
        let m = encoded.memory.data();
        let mut rep = Vec::with_capacity(m.len() * n);
        for _ in 0..n {
            rep.extend_from_slice(m);
        }
        let mut shape = encoded.memory.shape().to_vec();
        shape[0] = n;
        let memory = ctx.g.constant(Tensor::new(shape, rep)?);
        let rows: Vec<Vec<u32>> = prefixes.iter().map(|p| p.to_vec()).collect();
        let logits = self.decode(&mut ctx, memory, &vec![encoded.src_len; n], &rows)?;
        let lv = g.value(logits);
        let v = self.config.vocab_size;
        Ok((0..n)
            .map(|b| {
                let row = &lv.data()[(b * t + t - 1) * v..(b * t + t) * v];
                log_softmax(row)
            })
            .collect())
    }
}

impl LvpM3Model<f64> {
    /// Central-difference check of the loss gradient with respect to every
    /// parameter (or `max_entries` evenly spaced entries of each). Dropout is off.
    pub fn grad_check(
        &self,
        batch: &ModelBatch<f64>,
        h: f64,
        tol: f64,
        max_entries: Option<usize>,
    ) -> Result<GradCheckReport> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> = self.params.values().cloned().collect();
        grad_check_many(
            |g, vars| {
                let bound = Bound::from_vars(&names, vars);
                let mut ctx = Ctx::new(g, &bound, &self.config, None);
                self.forward_loss(&mut ctx, batch)
            },
            &inputs,
            h,
            tol,
            max_entries,
        )
    }
}

/// Composed-loss gradient check for every built-in variant on a tiny
/// model, with every parameter entry perturbed.
pub fn full_model_suite(h: f64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let visual = |seed| -> Result<Tensor<f64>> {
        let mut data = Vec::new();
        for id in ["a", "b"] {
            data.extend(crate::vision::pseudo_visual_tokens(id, 3, 4, seed).tokens.cast::<f64>().into_data());
        }
        Tensor::new(vec![2, 3, 4], data)
    };
    let batch = ModelBatch {
        src: vec![vec![5, 1, 9, 10, 11, 2], vec![6, 1, 12, 2]],
        tgt_in: vec![vec![1, 13, 9], vec![1, 10, 11, 12]],
        tgt_out: vec![vec![13, 9, 2], vec![10, 11, 12, 2]],
        visual: Some(visual(0)?),
    };
    let mut out = Vec::new();
    for variant in ["full", "no_lvpg", "static", "text_only"] {
        let config = ModelConfig {
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_v: 4,
            vocab_size: 14,
            variant: variant.to_string(),
            dropout: 0.0,
            init_seed: 11,
            ..ModelConfig::default()
        }
        .with_d_model(8);
        let model = LvpM3Model::<f64>::new(config)?;
        out.push((model.variant(), model.grad_check(&batch, h, tol, None)?));
    }
    Ok(out)
}

/// Decoder memory for a single source.
#[derive(Clone, Debug)]
pub struct EncodedSource<S: Scalar> {
    /// `[1, Ls, d]`.
    pub memory: Tensor<S>,
    pub src_len: usize,
}

pub fn log_softmax<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
    let lz = max + z.ln();
    row.iter().map(|x| x.as_f64() - lz).collect()
}
