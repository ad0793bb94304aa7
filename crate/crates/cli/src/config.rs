use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use lvpm3::model::ModelConfig;
use lvpm3::train::TrainConfig;

/// Contents of `train --config`. Relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Prefix of an existing tokenizer; one is trained from the corpus otherwise.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub bpe_vocab_size: usize,
    #[serde(default = "default_min_freq")]
    pub bpe_min_freq: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Epochs between numbered checkpoints; 0 keeps only `last.ckpt`.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_vocab_size() -> usize {
    8000
}

fn default_min_freq() -> u64 {
    2
}

fn default_log_every() -> u64 {
    50
}

fn default_checkpoint_every() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.tokenizer = cfg.tokenizer.map(|t| base.join(t));
        Ok(cfg)
    }
}
