//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! d_model = 64
//! stage2.epochs = 20
//! stage2.lr = 2e-3
//! ```

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::data::{DataConfig, Vocabulary};
use crate::training::TrainStageSpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Synthetic QA samples, train and test together.
    pub samples: usize,
    pub corpus_size: usize,
    pub corpus_eval_size: usize,
    pub base: TrainStageSpec,
    pub stage1: TrainStageSpec,
    pub stage2: TrainStageSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, RunConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| RunConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    pub fn desk() -> Self {
        let model = ModelConfig::desk(Vocabulary::standard().len());
        Self {
            seed: 0,
            model,
            data: DataConfig::for_model(&model),
            samples: 5000,
            corpus_size: 3000,
            corpus_eval_size: 300,
            base: TrainStageSpec::base_desk(),
            stage1: TrainStageSpec::stage1_desk(),
            stage2: TrainStageSpec::stage2_desk(),
        }
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), RunConfigError> {
        let v = value.trim();
        if let Some((stage, field)) = key.split_once('.') {
            let spec = match stage {
                "base" => &mut self.base,
                "stage1" => &mut self.stage1,
                "stage2" => &mut self.stage2,
                _ => return Err(RunConfigError::UnknownKey(key.to_string())),
            };
            match field {
                "epochs" => spec.epochs = parse(key, v)?,
                "lr" => spec.base_lr = parse(key, v)?,
                "batch_size" => spec.batch_size = parse(key, v)?,
                "seq_len" => spec.seq_len = parse(key, v)?,
                "warmup_frac" => spec.warmup_frac = parse(key, v)?,
                "weight_decay" => spec.weight_decay = parse(key, v)?,
                "clip_norm" => spec.clip_norm = parse(key, v)?,
                "wrong_answer_prob" => spec.wrong_answer_prob = parse(key, v)?,
                "beta1" => spec.beta1 = parse(key, v)?,
                "beta2" => spec.beta2 = parse(key, v)?,
                "eps" => spec.eps = parse(key, v)?,
                _ => return Err(RunConfigError::UnknownKey(key.to_string())),
            }
            return Ok(());
        }
        let (m, d) = (&mut self.model, &mut self.data);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "n_layers" => m.n_layers = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "d_ffn" => m.d_ffn = parse(key, v)?,
            "max_seq_len" => m.max_seq_len = parse(key, v)?,
            "adapter_dim" => m.adapter_dim = parse(key, v)?,
            "d_vis" => {
                m.d_vis = parse(key, v)?;
                d.d_vis = m.d_vis;
            }
            "queries_per_image" => {
                m.queries_per_image = parse(key, v)?;
                d.queries_per_image = m.queries_per_image;
            }
            "n_colors" => d.n_colors = parse(key, v)?,
            "n_shapes" => d.n_shapes = parse(key, v)?,
            "n_counts" => d.n_counts = parse(key, v)?,
            "jitter" => d.jitter = parse(key, v)?,
            "heavy_channel_scale" => d.heavy_channel_scale = parse(key, v)?,
            "test_fraction" => d.test_fraction = parse(key, v)?,
            "disjoint_split" => d.disjoint_split = parse(key, v)?,
            "samples" => self.samples = parse(key, v)?,
            "corpus_size" => self.corpus_size = parse(key, v)?,
            "corpus_eval_size" => self.corpus_eval_size = parse(key, v)?,
            _ => return Err(RunConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), RunConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(RunConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(RunConfigError::Syntax { line: i + 1 });
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Desk defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self, RunConfigError> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical `key = value` rendering; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("d_model = {}", m.d_model),
            format!("n_layers = {}", m.n_layers),
            format!("n_heads = {}", m.n_heads),
            format!("d_ffn = {}", m.d_ffn),
            format!("max_seq_len = {}", m.max_seq_len),
            format!("adapter_dim = {}", m.adapter_dim),
            format!("d_vis = {}", m.d_vis),
            format!("queries_per_image = {}", m.queries_per_image),
            format!("n_colors = {}", d.n_colors),
            format!("n_shapes = {}", d.n_shapes),
            format!("n_counts = {}", d.n_counts),
            format!("jitter = {:?}", d.jitter),
            format!("heavy_channel_scale = {:?}", d.heavy_channel_scale),
            format!("test_fraction = {:?}", d.test_fraction),
            format!("disjoint_split = {}", d.disjoint_split),
            format!("samples = {}", self.samples),
            format!("corpus_size = {}", self.corpus_size),
            format!("corpus_eval_size = {}", self.corpus_eval_size),
        ];
        for (name, s) in [("base", &self.base), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            lines.extend([
                format!("{name}.epochs = {}", s.epochs),
                format!("{name}.lr = {:?}", s.base_lr),
                format!("{name}.batch_size = {}", s.batch_size),
                format!("{name}.seq_len = {}", s.seq_len),
                format!("{name}.warmup_frac = {:?}", s.warmup_frac),
                format!("{name}.weight_decay = {:?}", s.weight_decay),
                format!("{name}.clip_norm = {:?}", s.clip_norm),
                format!("{name}.wrong_answer_prob = {:?}", s.wrong_answer_prob),
                format!("{name}.beta1 = {:?}", s.beta1),
                format!("{name}.beta2 = {:?}", s.beta2),
                format!("{name}.eps = {:?}", s.eps),
            ]);
        }
        lines.join("\n") + "\n"
    }
}
