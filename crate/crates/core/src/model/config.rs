// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};

/// Architecture hyperparameters of the toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq: usize,
    pub ln_epsilon: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Config with `d_mlp = 4·d_model` and `ln_epsilon = 1e-5`.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_seq: usize,
        seed: u64,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_mlp: 4 * d_model,
            max_seq,
            ln_epsilon: 1e-5,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DemError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_seq < 2 {
            return Err(DemError::Config("max_seq must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DemError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return Err(DemError::Config("ln_epsilon must be positive".into()));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(DemError::Config("vocab_size exceeds the token id range".into()));
        }
        Ok(())
    }
}
