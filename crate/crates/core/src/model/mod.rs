// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer: config, checkpoint I/O, forward pass with
//! interventions, reverse-mode gradients, greedy decoding and training.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod tokenizer;
mod train;

pub(crate) use backward::backward as backward_pass;
pub use backward::{loss_and_grads, nll_and_dlogits, ActivationGrads, GradSite, LossAndGrads};
pub use checkpoint::{
    init_model, load_checkpoint, save_checkpoint, Checkpoint, LayerWeights, CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub(crate) use forward::run;
pub use forward::{
    forward, generate_greedy, unembed, validate_interventions, ActivationSite, ActivationTape,
    Intervention, InterventionAction, SiteKind,
};
pub use tokenizer::{split_words, TokenId, Vocabulary, EOT, UNK};
pub use train::{corpus_nll, train_toy, Optimizer, TrainOptions, TrainReport, TrainSequence};
