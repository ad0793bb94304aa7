use std::collections::HashMap;
use std::ops::Index;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameters in declaration order.
pub type ParamStore<S> = IndexMap<String, Tensor<S>>;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations before materialization.
#[derive(Clone, Debug, Default)]
pub struct ParamSpecs {
    specs: Vec<ParamSpec>,
}

impl ParamSpecs {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    /// `{prefix}.weight` `[d_in, d_out]` with fan-in uniform init, `{prefix}.bias` zeros.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        let bound = 1.0 / (d_in as f64).sqrt();
        self.add(format!("{prefix}.weight"), &[d_in, d_out], Init::Uniform(bound));
        self.add(format!("{prefix}.bias"), &[d_out], Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gain"), &[d], Init::Ones);
        self.add(format!("{prefix}.bias"), &[d], Init::Zeros);
    }

    pub fn attention(&mut self, prefix: &str, d: usize) {
        for proj in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{proj}"), d, d);
        }
    }

    pub fn ffn(&mut self, prefix: &str, d: usize, d_ffn: usize) {
        self.linear(&format!("{prefix}.fc1"), d, d_ffn);
        self.linear(&format!("{prefix}.fc2"), d_ffn, d);
    }

    /// Self-attention + FFN block with two post-norms.
    pub fn encoder_layer(&mut self, prefix: &str, d: usize, d_ffn: usize) {
        self.attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.ffn(&format!("{prefix}.ffn"), d, d_ffn);
        self.layer_norm(&format!("{prefix}.ln2"), d);
    }

    /// Query attends over a second stream, then FFN.
    pub fn cross_layer(&mut self, prefix: &str, d: usize, d_ffn: usize) {
        self.encoder_layer(prefix, d, d_ffn);
    }

    pub fn decoder_layer(&mut self, prefix: &str, d: usize, d_ffn: usize) {
        self.attention(&format!("{prefix}.self_attn"), d);
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.cross_attn"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.ffn(&format!("{prefix}.ffn"), d, d_ffn);
        self.layer_norm(&format!("{prefix}.ln3"), d);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Draws initial values in declaration order from a seeded generator.
    pub fn materialize<S: Scalar>(&self, seed: u64) -> Result<ParamStore<S>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::with_capacity(self.specs.len());
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let values: Vec<f64> = match &spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..*b)).collect(),
                Init::Values(v) => v.clone(),
            };
            let t = Tensor::from_f64(&spec.shape, &values)?;
            if store.insert(spec.name.clone(), t).is_some() {
                return Err(Error::Config(format!("parameter `{}` declared twice", spec.name)));
            }
        }
        Ok(store)
    }

    /// Checks that `store` has exactly the declared names and shapes.
    pub fn check(&self, store: &ParamStore<impl Scalar>) -> Result<()> {
        if store.len() != self.specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.specs.len(),
                store.len()
            )));
        }
        for spec in &self.specs {
            let t = store
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Places each parameter on `graph`, as a trainable leaf or a constant.
    pub fn new<S: Scalar>(graph: &mut Graph<S>, store: &ParamStore<S>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Pairs names with already-placed variables, in order.
    pub fn from_vars<'n>(names: impl IntoIterator<Item = &'n String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not declared"))
    }
}
