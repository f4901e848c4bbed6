use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Maximum number of attended slots: prefix slots plus content positions.
    pub context_len: usize,
    /// Number of prefix activation slots per layer.
    pub prefix_len: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
            prefix_len: 10,
            d_ff: 256,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_len", self.context_len),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < self.prefix_len + 2 {
            return Err(Error::Config(format!(
                "context_len {} must be at least prefix_len + 2 = {}",
                self.context_len,
                self.prefix_len + 2
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Content positions available once the prefix is attached.
    pub fn content_capacity(&self) -> usize {
        self.context_len - self.prefix_len
    }
}
