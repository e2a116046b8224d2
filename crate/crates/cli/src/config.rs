//! Flat TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use bridgepath::bridge::DEFAULT_DELTA;
use bridgepath::distill::{LossWeights, PathMode, TrainConfig};
use bridgepath::seq2seq::ModelConfig;

use crate::UsageError;

/// Everything a training run needs. Unknown keys are rejected so typos do
/// not silently fall back to defaults.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_corpus: PathBuf,
    pub valid_corpus: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Step log; defaults to `<checkpoint_dir>/metrics.csv`.
    pub metrics_csv: Option<PathBuf>,
    pub window: usize,
    pub min_freq: usize,

    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_mult: usize,
    pub mapper_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub encode_per_utterance: bool,

    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub w_beta: f64,
    pub w_nll: f64,
    pub w_kl: f64,
    pub block_teacher: bool,
    pub path_mode: PathMode,
    pub triplets_per_dialogue: usize,
    pub checkpoint_every: u64,
    pub patience: usize,
    pub mixup: bool,

    pub mode: String,
    pub decoding: String,
    pub max_new_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            train_corpus: PathBuf::new(),
            valid_corpus: None,
            checkpoint_dir: PathBuf::new(),
            metrics_csv: None,
            window: 5,
            min_freq: bridgepath::corpus::DEFAULT_MIN_FREQ,
            d_model: m.d_model,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ff_mult: m.ff_mult,
            mapper_hidden: m.mapper_hidden,
            max_len: m.max_len,
            dropout: m.dropout,
            encode_per_utterance: m.encode_per_utterance,
            k: t.k,
            lr: t.lr,
            batch_size: t.batch_size,
            warmup: t.warmup,
            beta1: t.beta1,
            beta2: t.beta2,
            delta: DEFAULT_DELTA,
            max_steps: t.max_steps,
            seed: t.seed,
            w_beta: t.weights.beta,
            w_nll: t.weights.nll,
            w_kl: t.weights.kl,
            block_teacher: t.block_teacher,
            path_mode: t.path_mode,
            triplets_per_dialogue: t.triplets_per_dialogue,
            checkpoint_every: t.checkpoint_every,
            patience: t.patience,
            mixup: t.mixup,
            mode: "expectation".into(),
            decoding: "topk:5".into(),
            max_new_tokens: 20,
        }
    }
}

impl RunConfig {
    /// Parses and validates; every failure is a [`UsageError`] naming the
    /// offending field. Relative paths resolve against the config file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_corpus);
        fix(&mut self.checkpoint_dir);
        if let Some(p) = self.valid_corpus.as_mut() {
            fix(p);
        }
        if let Some(p) = self.metrics_csv.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let need_file = |field: &str, p: &Path| {
            if p.as_os_str().is_empty() {
                Err(UsageError(format!("config field `{field}` is required")))
            } else if !p.is_file() {
                Err(UsageError(format!("config field `{field}`: no such file {}", p.display())))
            } else {
                Ok(())
            }
        };
        need_file("train_corpus", &self.train_corpus)?;
        if let Some(v) = &self.valid_corpus {
            need_file("valid_corpus", v)?;
        }
        if self.checkpoint_dir.as_os_str().is_empty() {
            return Err(UsageError("config field `checkpoint_dir` is required".into()));
        }
        if self.window < 2 {
            return Err(UsageError("config field `window` must be at least 2".into()));
        }
        if self.min_freq < 1 {
            return Err(UsageError("config field `min_freq` must be at least 1".into()));
        }
        bridgepath::infer::latent_sources()
            .build(&self.mode)
            .map_err(|e| UsageError(format!("config field `mode`: {e}")))?;
        bridgepath::decode::decoders()
            .build(&self.decoding)
            .map_err(|e| UsageError(format!("config field `decoding`: {e}")))?;
        // vocabulary size is only known after loading the corpus; any valid
        // placeholder lets the remaining fields be checked now
        self.train_config(64)
            .validate()
            .map_err(|e| UsageError(format!("config: {e}")))?;
        Ok(())
    }

    pub fn train_config(&self, vocab_size: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                vocab_size,
                d_model: self.d_model,
                heads: self.heads,
                enc_layers: self.enc_layers,
                dec_layers: self.dec_layers,
                ff_mult: self.ff_mult,
                mapper_hidden: self.mapper_hidden,
                max_len: self.max_len,
                dropout: self.dropout,
                encode_per_utterance: self.encode_per_utterance,
            },
            k: self.k,
            lr: self.lr,
            batch_size: self.batch_size,
            warmup: self.warmup,
            beta1: self.beta1,
            beta2: self.beta2,
            delta: self.delta,
            max_steps: self.max_steps,
            seed: self.seed,
            weights: LossWeights {
                beta: self.w_beta,
                nll: self.w_nll,
                kl: self.w_kl,
            },
            block_teacher: self.block_teacher,
            path_mode: self.path_mode,
            triplets_per_dialogue: self.triplets_per_dialogue,
            checkpoint_every: self.checkpoint_every,
            patience: self.patience,
            mixup: self.mixup,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_csv
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.join("metrics.csv"))
    }
}
