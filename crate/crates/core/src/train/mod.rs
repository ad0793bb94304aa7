//! Adam with warmup and inverse-square-root decay, the epoch loop over
//! mixed-direction batches, metrics logging and resumable checkpoints.

mod adam;
mod schedule;

pub use adam::adam_step;
pub use schedule::TrainConfig;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Ctx, LvpM3Model, ModelBatch, OptimizerSection, ParamStore};
use crate::text::{make_batches, ParallelExample, Tokenizer, PAD};
use crate::vision::{stable_hash, VtokFile};

/// Loop position and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub config: TrainConfig,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    config: TrainConfig,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            config,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn to_section(&self) -> Result<OptimizerSection> {
        let meta = StateMeta {
            step: self.step,
            epoch: self.epoch,
            batch_in_epoch: self.batch_in_epoch,
            config: self.config.clone(),
        };
        Ok(OptimizerSection {
            meta: serde_json::to_value(meta)?,
            m: self.m.clone(),
            v: self.v.clone(),
        })
    }

    pub fn from_section(section: &OptimizerSection) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(section.meta.clone())?;
        Ok(Self {
            step: meta.step,
            epoch: meta.epoch,
            batch_in_epoch: meta.batch_in_epoch,
            config: meta.config,
            m: section.m.clone(),
            v: section.v.clone(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr(self.step + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
}

/// Forward, backward and one Adam update. Dropout is seeded by
/// `(seed, step)`, so a resumed run repeats the same masks.
pub fn train_step(model: &mut LvpM3Model<f32>, state: &mut TrainState, batch: &ModelBatch<f32>) -> Result<f64> {
    let step = state.step + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let loss = {
        let mut ctx = Ctx::new(&mut g, &bound, model.config(), Some(&mut rng));
        model.forward_loss(&mut ctx, batch)?
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value} at step {step}")));
    }
    g.backward(loss)?;
    let mut grads = IndexMap::with_capacity(model.params().len());
    for name in model.params().keys() {
        let var = bound[name.as_str()];
        let grad = g
            .grad(var)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` received no gradient")))?;
        grads.insert(name.clone(), grad);
    }
    let lr = state.config.lr(step);
    let cfg = state.config.clone();
    adam_step(model.params_mut(), &grads, &mut state.m, &mut state.v, step, lr, &cfg)?;
    state.step = step;
    Ok(value)
}

/// Where the loop writes its outputs; every field is optional.
#[derive(Clone, Debug, Default)]
pub struct LoopOutputs {
    /// Append-only CSV `step,epoch,lr,loss,tokens_per_sec`.
    pub metrics: Option<PathBuf>,
    /// Directory receiving `epoch_{n}.ckpt` and `last.ckpt`.
    pub checkpoints: Option<PathBuf>,
    /// Epochs between `epoch_{n}.ckpt` files: every epoch when unset, none
    /// when 0. `last.ckpt` is always written.
    pub checkpoint_every: Option<usize>,
    pub tokenizer: Option<Tokenizer>,
}

/// Batch order for `epoch`, fixed by the training seed.
pub fn epoch_batches(examples: &[ParallelExample], cfg: &TrainConfig, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let seed = cfg.seed ^ stable_hash("epoch", epoch as u64);
    Ok(make_batches(examples, cfg.max_tokens, Some(seed))?
        .into_iter()
        .map(|b| b.indices)
        .collect())
}

/// Runs until `state.config.epochs` epochs are complete or `max_steps` is
/// reached. `on_step` sees every step's metrics as they happen.
pub fn train_loop(
    model: &mut LvpM3Model<f32>,
    examples: &[ParallelExample],
    vtok: Option<&VtokFile>,
    state: &mut TrainState,
    outputs: &LoopOutputs,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    let vtok = if model.uses_vision() {
        let file = vtok.ok_or_else(|| {
            Error::Config(format!("variant `{}` requires a VTOK file", model.variant()))
        })?;
        file.check_width(model.config().d_v)?;
        Some(file)
    } else {
        None
    };
    let mut log = match &outputs.metrics {
        Some(path) => Some(MetricsLog::open(path)?),
        None => None,
    };
    if let Some(dir) = &outputs.checkpoints {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut history = Vec::new();
    let max_steps = state.config.max_steps.unwrap_or(u64::MAX);
    while state.epoch < state.config.epochs && state.step < max_steps {
        let batches = epoch_batches(examples, &state.config, state.epoch)?;
        while state.batch_in_epoch < batches.len() && state.step < max_steps {
            let members: Vec<&ParallelExample> = batches[state.batch_in_epoch].iter().map(|&i| &examples[i]).collect();
            let batch = ModelBatch::from_examples(&members, vtok)?;
            let tokens: usize = members
                .iter()
                .map(|e| e.source_ids.len() + e.target_ids.iter().filter(|&&t| t != PAD).count())
                .sum();
            let start = Instant::now();
            let lr = state.config.lr(state.step + 1);
            let loss = train_step(model, state, &batch)?;
            state.batch_in_epoch += 1;
            let metrics = StepMetrics {
                step: state.step,
                epoch: state.epoch,
                lr,
                loss,
                tokens_per_sec: tokens as f64 / start.elapsed().as_secs_f64().max(1e-9),
            };
            if let Some(log) = log.as_mut() {
                log.append(&metrics)?;
            }
            on_step(&metrics);
            history.push(metrics);
        }
        if state.batch_in_epoch >= batches.len() {
            state.epoch += 1;
            state.batch_in_epoch = 0;
            let every = outputs.checkpoint_every.unwrap_or(1);
            if let Some(dir) = outputs.checkpoints.as_ref().filter(|_| every > 0 && state.epoch.is_multiple_of(every)) {
                save_checkpoint(model, state, outputs.tokenizer.as_ref(), &dir.join(format!("epoch_{}.ckpt", state.epoch)))?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoints {
        save_checkpoint(model, state, outputs.tokenizer.as_ref(), &dir.join("last.ckpt"))?;
    }
    Ok(history)
}

pub fn save_checkpoint(model: &LvpM3Model<f32>, state: &TrainState, tokenizer: Option<&Tokenizer>, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model, tokenizer);
    ckpt.optimizer = Some(state.to_section()?);
    ckpt.save(path)
}

/// Restores model and loop state; a checkpoint without an optimizer section
/// starts a fresh state with `config`.
pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<(LvpM3Model<f32>, TrainState)> {
    let model = ckpt.model()?;
    let state = match &ckpt.optimizer {
        Some(section) => {
            let mut s = TrainState::from_section(section)?;
            s.config.epochs = config.epochs;
            s.config.max_steps = config.max_steps;
            s
        }
        None => TrainState::new(config),
    };
    Ok((model, state))
}

struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "step,epoch,lr,loss,tokens_per_sec").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{},{},{:e},{:.6},{:.1}", m.step, m.epoch, m.lr, m.loss, m.tokens_per_sec)
            .map_err(|e| Error::io(&self.path, e))
    }
}
