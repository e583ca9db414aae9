use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// Shape of the base transformer and its injected modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Width of one raw visual feature vector.
    pub d_vis: usize,
    /// Visual feature vectors produced per image.
    pub queries_per_image: usize,
    /// Bottleneck width of every adapter.
    pub adapter_dim: usize,
}

impl ModelConfig {
    /// Single-core desk configuration used by the end-to-end runs.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            vocab_size,
            max_seq_len: 64,
            d_vis: 16,
            queries_per_image: 4,
            adapter_dim: 8,
        }
    }

    /// Small configuration for exhaustive finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 24,
            vocab_size,
            max_seq_len: 32,
            d_vis: 12,
            queries_per_image: 2,
            adapter_dim: 4,
        }
    }

    /// LLaMA-2-7B with a Q-former front end. Documentation only; far beyond
    /// what this crate can train.
    pub fn full_scale() -> Self {
        Self {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_ffn: 11008,
            vocab_size: 32000,
            max_seq_len: 512,
            d_vis: 768,
            queries_per_image: 32,
            adapter_dim: 32,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_vis", self.d_vis),
            ("queries_per_image", self.queries_per_image),
            ("adapter_dim", self.adapter_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfigError(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(ConfigError(format!("rotary embeddings need an even d_head, got {}", self.d_head())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk(36).validate().unwrap();
        ModelConfig::tiny(36).validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        assert_eq!(ModelConfig::full_scale().adapter_dim, 32);
    }

    #[test]
    fn rejects_bad_heads() {
        let mut c = ModelConfig::desk(36);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 32; // d_head 2 is fine
        c.validate().unwrap();
        c.adapter_dim = 0;
        assert!(c.validate().unwrap_err().0.contains("adapter_dim"));
    }
}
