//! Ways of turning visual tokens into prompts in the model space. Each is a
//! [`PromptStrategy`] registered by name in a [`StrategyRegistry`]; the
//! configured `variant` selects one at model construction.

use indexmap::IndexMap;

use super::config::ModelConfig;
use super::layers::Ctx;
use super::params::{Init, ParamSpecs};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub trait PromptStrategy<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the model consumes visual tokens at all under this strategy.
    fn uses_vision(&self) -> bool {
        true
    }

    fn declare(&self, config: &ModelConfig, specs: &mut ParamSpecs);

    /// Maps visual tokens `[B, M_v, d_v]` to prompts `[B, M_v, d_model]`.
    /// `tag_ids` holds each row's target-language tag.
    fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, tag_ids: &[usize]) -> Result<Var>;
}

pub type StrategyCtor<S> = fn() -> Box<dyn PromptStrategy<S>>;

pub struct StrategyRegistry<S: Scalar> {
    entries: IndexMap<&'static str, StrategyCtor<S>>,
}

fn make<S: Scalar, T: PromptStrategy<S> + Default + 'static>() -> Box<dyn PromptStrategy<S>> {
    Box::new(T::default())
}

impl<S: Scalar> StrategyRegistry<S> {
    pub fn empty() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// `full`, `no_lvpg`, `static`, `text_only`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("full", make::<S, LanguageAware>);
        r.register("no_lvpg", make::<S, DirectProjection>);
        r.register("static", make::<S, StaticMapping>);
        r.register("text_only", make::<S, TextOnly>);
        r
    }

    pub fn register(&mut self, name: &'static str, ctor: StrategyCtor<S>) {
        self.entries.insert(name, ctor);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn PromptStrategy<S>>> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}`; known: {}", self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// Row-major `[rows, cols]` with ones on the leading diagonal.
fn truncated_identity(rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|k| if k / cols == k % cols { 1.0 } else { 0.0 })
        .collect()
}

/// Controller network producing a per-language affine map from the
/// target-language tag embedding.
#[derive(Default)]
pub struct LanguageAware;

impl LanguageAware {
    /// Returns `(W [B, d_v, d_model], b [B, d_model])`, one map per tag.
    pub fn controller_forward<S: Scalar>(ctx: &mut Ctx<'_, S>, tag_ids: &[usize]) -> Result<(Var, Var)> {
        let (d, d_v) = (ctx.config.d_model, ctx.config.d_v);
        let batch = tag_ids.len();
        let table = ctx.p("embed.weight");
        let t = ctx.g.embedding(table, tag_ids)?;
        let h = ctx.linear("lvpg.fc1", t)?;
        let h = ctx.g.relu(h);
        let theta = ctx.linear("lvpg.fc2", h)?;
        let w = ctx.g.narrow(theta, 1, 0, d_v * d)?;
        let w = ctx.g.reshape(w, &[batch, d_v, d])?;
        let b = ctx.g.narrow(theta, 1, d_v * d, d)?;
        Ok((w, b))
    }

    /// `v·W + b` per batch row.
    pub fn apply_mapping<S: Scalar>(ctx: &mut Ctx<'_, S>, visual: Var, w: Var, b: Var) -> Result<Var> {
        ctx.g.linear(visual, w, b)
    }
}

impl<S: Scalar> PromptStrategy<S> for LanguageAware {
    fn name(&self) -> &'static str {
        "full"
    }

    fn declare(&self, c: &ModelConfig, specs: &mut ParamSpecs) {
        specs.linear("lvpg.fc1", c.d_model, c.d_ctrl);
        // Near-zero output weights: the initial map is the identity bias below.
        let bound = 0.1 / (c.d_ctrl as f64).sqrt();
        specs.add("lvpg.fc2.weight", &[c.d_ctrl, c.controller_out()], Init::Uniform(bound));
        let mut bias = truncated_identity(c.d_v, c.d_model);
        bias.extend(std::iter::repeat_n(0.0, c.d_model));
        specs.add("lvpg.fc2.bias", &[c.controller_out()], Init::Values(bias));
    }

    fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, tag_ids: &[usize]) -> Result<Var> {
        let (w, b) = Self::controller_forward(ctx, tag_ids)?;
        Self::apply_mapping(ctx, visual, w, b)
    }
}

/// One learned affine map shared by all languages.
#[derive(Default)]
pub struct StaticMapping;

impl<S: Scalar> PromptStrategy<S> for StaticMapping {
    fn name(&self) -> &'static str {
        "static"
    }

    fn declare(&self, c: &ModelConfig, specs: &mut ParamSpecs) {
        specs.add("static.weight", &[c.d_v, c.d_model], Init::Values(truncated_identity(c.d_v, c.d_model)));
        specs.add("static.bias", &[c.d_model], Init::Zeros);
    }

    fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, _tag_ids: &[usize]) -> Result<Var> {
        ctx.linear("static", visual)
    }
}

/// Bias-free learned projection of the visual tokens.
#[derive(Default)]
pub struct DirectProjection;

impl<S: Scalar> PromptStrategy<S> for DirectProjection {
    fn name(&self) -> &'static str {
        "no_lvpg"
    }

    fn declare(&self, c: &ModelConfig, specs: &mut ParamSpecs) {
        let bound = 1.0 / (c.d_v as f64).sqrt();
        specs.add("proj.weight", &[c.d_v, c.d_model], Init::Uniform(bound));
    }

    fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, _tag_ids: &[usize]) -> Result<Var> {
        let w = ctx.p("proj.weight");
        ctx.g.matmul(visual, w)
    }
}

/// No visual input: the decoder attends over the plain source encoding.
#[derive(Default)]
pub struct TextOnly;

impl<S: Scalar> PromptStrategy<S> for TextOnly {
    fn name(&self) -> &'static str {
        "text_only"
    }

    fn uses_vision(&self) -> bool {
        false
    }

    fn declare(&self, _c: &ModelConfig, _specs: &mut ParamSpecs) {}

    fn prompts(&self, _ctx: &mut Ctx<'_, S>, _visual: Var, _tag_ids: &[usize]) -> Result<Var> {
        Err(Error::Variant {
            op: "prompts",
            variant: "text_only".into(),
        })
    }
}
