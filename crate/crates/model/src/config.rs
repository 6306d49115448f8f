//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale default: every architectural feature of the reference
    /// family (SwiGLU, RoPE, multi-query attention, RMSNorm pre-norm),
    /// sized to train in minutes on CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 8,
            d_model: 48,
            d_ffn: 192,
            n_heads: 4,
            n_kv_heads: 1,
            vocab_size: 64,
            rope_theta: 10_000.0,
            max_seq_len: 512,
            dropout_rate: 0.0,
        }
    }

    /// Tiny config for unit tests and gradient checks.
    pub fn micro(n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            n_kv_heads: 1,
            vocab_size: 16,
            rope_theta: 10_000.0,
            max_seq_len: 64,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_kv_heads < 1 {
            return Err(ModelError::InvalidConfig("n_kv_heads must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::InvalidConfig(
                "head_dim must be even for rotary embeddings".into(),
            ));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig("degenerate dimensions".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count for the constructed model:
    ///   embed: V*d
    ///   per layer: 2 norms (2d) + Wq (d*d) + Wk,Wv (2 * d * kv*hd)
    ///              + Wo (d*d) + SwiGLU gate/up (2 * d*f) + down (f*d)
    ///   final norm: d, untied head: d*V
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let v = self.vocab_size;
        let kv_dim = self.n_kv_heads * self.head_dim();
        let per_layer = 2 * d + d * d + 2 * d * kv_dim + d * d + 2 * d * f + f * d;
        v * d + self.n_layers * per_layer + d + d * v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_heads() {
        let mut c = ModelConfig::desk();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_kv_heads = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn multi_query_kv_projection_is_one_over_n_heads_of_q() {
        let c = ModelConfig::desk();
        assert_eq!(c.n_kv_heads, 1);
        let q_params = c.d_model * c.d_model;
        let k_params = c.d_model * c.n_kv_heads * c.head_dim();
        assert_eq!(k_params * c.n_heads, q_params);
    }
}
