// SPDX-License-Identifier: MIT OR Apache-2.0

//! The reference toy suite: vocabulary, generated records and a model
//! trained to memorize them.

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_toy_corpus, toy_vocabulary, CKRecord};
use crate::error::Result;
use crate::model::{
    corpus_nll, init_model, train_toy, Optimizer, Checkpoint, ModelConfig, TrainOptions, TrainReport,
    TrainSequence, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySuiteConfig {
    pub n_records: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub train: TrainOptions,
    /// Seeds corpus generation and weight init.
    pub seed: u64,
}

impl Default for ToySuiteConfig {
    fn default() -> Self {
        Self {
            n_records: 50,
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq: 32,
            train: TrainOptions {
                steps: 500,
                lr: 5e-3,
                batch_size: Some(16),
                seed: 0,
                optimizer: Optimizer::adam(),
            },
            seed: 0,
        }
    }
}

impl ToySuiteConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_seq,
            self.seed,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ToySuite {
    pub config: ToySuiteConfig,
    pub vocab: Vocabulary,
    pub records: Vec<CKRecord>,
    pub sequences: Vec<TrainSequence>,
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    /// Corpus NLL after training.
    pub final_nll: f64,
}

/// Generates the corpus and trains a fresh model on it. Deterministic in
/// `config`.
pub fn build_toy_suite(config: &ToySuiteConfig) -> Result<ToySuite> {
    let vocab = toy_vocabulary(config.vocab_size)?;
    let corpus = generate_toy_corpus(config.seed, config.n_records, &vocab)?;
    let init = init_model(&config.model_config())?;
    let (checkpoint, report) = train_toy(&init, &corpus.sequences, &config.train)?;
    let final_nll = corpus_nll(&checkpoint, &corpus.sequences)?;
    Ok(ToySuite {
        config: config.clone(),
        vocab,
        records: corpus.records,
        sequences: corpus.sequences,
        checkpoint,
        report,
        final_nll,
    })
}
