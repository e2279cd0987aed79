use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lfd_core::corpus::{Task, Tokenizer};
use lfd_core::decode::DecodeConfig;
use lfd_core::model::ModelConfig;
use lfd_core::objectives::ObjectiveConfig;
use lfd_core::trainer::LfdConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    /// Pair records longer than this are dropped at load time.
    #[serde(
        default = "default_max_tokens",
        skip_serializing_if = "Option::is_none"
    )]
    pub max_tokens: Option<usize>,
    /// Targets longer than this are cut into windows.
    #[serde(default = "default_max_target")]
    pub max_target: usize,
}

fn default_max_tokens() -> Option<usize> {
    Some(100)
}

fn default_max_target() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Metric names to report; empty means every applicable metric.
    pub names: Vec<String>,
    pub distinct_n: Vec<usize>,
    pub novel_n: Vec<usize>,
    pub bleu_max_n: usize,
    pub self_bleu_n: usize,
    /// Look-back window for generation repetition; absent means unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetition_window: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            distinct_n: vec![1, 2],
            novel_n: vec![1, 2],
            bleu_max_n: 4,
            self_bleu_n: 4,
            repetition_window: None,
        }
    }
}

pub const METRIC_NAMES: [&str; 14] = [
    "ppl_paper",
    "ppl_standard",
    "zipf",
    "repetition",
    "unique",
    "kld",
    "bleu",
    "self_bleu",
    "distinct",
    "novel",
    "rouge_1",
    "rouge_2",
    "rouge_l",
    "length",
];

impl MetricsConfig {
    pub fn wants(&self, name: &str) -> bool {
        self.names.is_empty() || self.names.iter().any(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: LfdConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        // Absolute paths keep the echoed config valid from any directory.
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.test);
        if let Some(v) = cfg.data.valid.as_mut() {
            resolve(v);
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(o);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Replaces every seed with `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.decode.seed = seed;
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        let v =
            |r: lfd_core::Result<()>| r.map_err(|e| anyhow::Error::new(UsageError(e.to_string())));
        v(self.train.validate())?;
        v(self.objective.validate())?;
        v(self.decode.validate())?;
        if self.train.r != self.objective.r {
            return Err(UsageError(format!(
                "train.r ({}) and objective.r ({}) disagree",
                self.train.r, self.objective.r
            ))
            .into());
        }
        if self.train.lambda != self.objective.lambda {
            return Err(UsageError(format!(
                "train.lambda ({}) and objective.lambda ({}) disagree",
                self.train.lambda, self.objective.lambda
            ))
            .into());
        }
        if self.data.max_target == 0 {
            bail!(UsageError("data.max_target must be positive".into()));
        }
        for name in &self.metrics.names {
            if !METRIC_NAMES.contains(&name.as_str()) {
                bail!(UsageError(format!(
                    "unknown metric `{name}` in metrics.names"
                )));
            }
        }
        if self.task == Task::Lm
            && self.decode.prefix_len + self.decode.max_new_tokens > self.model.max_positions
        {
            bail!(UsageError(format!(
                "decode.prefix_len + decode.max_new_tokens exceeds model.max_positions ({})",
                self.model.max_positions
            )));
        }
        Ok(())
    }

    /// Fills the vocabulary size in and validates the model.
    pub fn finalize_model(&mut self, vocab_len: usize) -> Result<()> {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = vocab_len;
        } else if self.model.vocab_size < vocab_len {
            bail!(UsageError(format!(
                "model.vocab_size {} is smaller than the vocabulary ({vocab_len})",
                self.model.vocab_size
            )));
        }
        self.model
            .validate()
            .map_err(|e| UsageError(e.to_string()))
            .context("model config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
task = "lm"

[data]
train = "train.txt"
test = "test.txt"

[model]
arch = "decoder_only"
layers = 2
model_dim = 16
heads = 2
ffn_dim = 32
max_positions = 64

[train]
k = { epochs = 1.0 }
h = { steps = 5 }

[decode]
prefix_len = 8
max_new_tokens = 16
"#;

    #[test]
    fn round_trips_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, SAMPLE).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(
            cfg.data.train,
            std::path::absolute(dir.path().join("train.txt")).unwrap()
        );
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            SAMPLE.replace("layers = 2", "layers = 2\nlayerz = 3"),
        )
        .unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn conflicting_ratios_are_rejected() {
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.objective.r = 0.5;
        assert!(cfg.validate().is_err());
    }
}
