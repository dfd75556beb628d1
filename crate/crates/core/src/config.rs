use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub vision_feature_dim: usize,
    pub ffn_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default: 12 layers, width 64, 4 heads.
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 64,
            max_seq_len: 32,
            vision_feature_dim: 16,
            ffn_dim: 256,
        }
    }

    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            vocab_size: 12,
            max_seq_len: 12,
            vision_feature_dim: 4,
            ffn_dim: 16,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers < 2 {
            return fail("num_layers must be at least 2");
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail("hidden_dim must be a positive multiple of num_heads");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, max_seq_len and ffn_dim must be positive");
        }
        if self.vision_feature_dim == 0 {
            return fail("vision_feature_dim must be positive");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
