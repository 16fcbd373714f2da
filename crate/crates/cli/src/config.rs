//! Plain `key = value` experiment configuration.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys:
//! `d`, `n_heads`, `layers`, `seq_len`, `rank`, `method`, `lr0`,
//! `total_iters`, `batch`, `seed`, `task`, and `n_samples` (size of the
//! synthetic data set). Omitted keys take the defaults below.

use std::path::Path;
use std::str::FromStr;

use lorapt::adapters::Method;
use lorapt::tinymodel::{ModelConfig, Task, TrainConfig};

#[derive(Debug, thiserror::Error)]
#[error("{origin}:{line}: {msg}")]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub method: Method,
    pub rank: usize,
    pub train: TrainConfig,
    pub n_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d: 16,
                n_heads: 2,
                layers: 2,
                seq_len: 8,
                task: Task::Regression,
            },
            method: Method::LoraPt,
            rank: 1,
            train: TrainConfig {
                lr0: 1e-2,
                total_iters: 200,
                batch: 4,
                seed: 7,
                ..TrainConfig::default()
            },
            n_samples: 32,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| format!("{key}: cannot parse {raw:?}: {e}"))
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let err = |msg: String| ConfigError {
                origin: origin.to_string(),
                line: idx + 1,
                msg,
            };
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate().map_err(|msg| ConfigError {
            origin: origin.to_string(),
            line: 0,
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        Self::parse(&text, &origin)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "d" => self.model.d = parse_value(key, v)?,
            "n_heads" => self.model.n_heads = parse_value(key, v)?,
            "layers" => self.model.layers = parse_value(key, v)?,
            "seq_len" => self.model.seq_len = parse_value(key, v)?,
            "task" => self.model.task = v.parse().map_err(|e: lorapt::Error| e.to_string())?,
            "rank" => self.rank = parse_value(key, v)?,
            "method" => self.method = v.parse().map_err(|e: lorapt::Error| e.to_string())?,
            "lr0" => self.train.lr0 = parse_value(key, v)?,
            "total_iters" => self.train.total_iters = parse_value(key, v)?,
            "batch" => self.train.batch = parse_value(key, v)?,
            "seed" => self.train.seed = parse_value(key, v)?,
            "n_samples" => self.n_samples = parse_value(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        if self.model.layers == 0 {
            return Err("layers must be positive".into());
        }
        self.train.validate().map_err(|e| e.to_string())?;
        if self.rank == 0 || self.rank > self.model.d {
            return Err(format!("rank {} out of range 1..={}", self.rank, self.model.d));
        }
        if self.n_samples == 0 {
            return Err("n_samples must be positive".into());
        }
        if !self.train.lr0.is_finite() {
            return Err("lr0 must be finite".into());
        }
        Ok(())
    }

    /// Renders the configuration back into the file format.
    pub fn to_text(&self) -> String {
        format!(
            "d = {}\nn_heads = {}\nlayers = {}\nseq_len = {}\nrank = {}\nmethod = {}\nlr0 = {}\ntotal_iters = {}\nbatch = {}\nseed = {}\ntask = {}\nn_samples = {}\n",
            self.model.d,
            self.model.n_heads,
            self.model.layers,
            self.model.seq_len,
            self.rank,
            self.method.name(),
            self.train.lr0,
            self.train.total_iters,
            self.train.batch,
            self.train.seed,
            self.model.task.name(),
            self.n_samples
        )
    }
}
