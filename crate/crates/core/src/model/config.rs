use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DEFAULT_SIGMA_MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// The transformer reads past semantic token ids.
    Token,
    /// The transformer reads past continuous frames.
    Vector,
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputMode::Token => "token",
            InputMode::Vector => "vector",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_mode: InputMode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Number of future tokens predicted from each context vector.
    pub k_future: usize,
    pub cfm_enabled: bool,
    pub cfm_blocks: usize,
    pub cfm_hidden: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub time_embed_dim: usize,
    pub cond_dropout_p: f64,
    pub sigma_min: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::Vector,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            k_future: 1,
            cfm_enabled: true,
            cfm_blocks: 3,
            cfm_hidden: 256,
            vocab_size: 64,
            embed_dim: 32,
            time_embed_dim: 32,
            cond_dropout_p: 0.05,
            sigma_min: DEFAULT_SIGMA_MIN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_future == 0 {
            return Err(Error::config("k_future must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::config("cond_dropout_p must lie in [0, 1]"));
        }
        if self.vocab_size < 3 || self.embed_dim == 0 {
            return Err(Error::config("vocab_size must be >= 3 and embed_dim >= 1"));
        }
        if self.cfm_enabled && (self.cfm_hidden == 0 || self.time_embed_dim % 2 != 0) {
            return Err(Error::config("cfm_hidden must be positive and time_embed_dim even"));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::config("sigma_min must lie in [0, 1)"));
        }
        Ok(())
    }
}
