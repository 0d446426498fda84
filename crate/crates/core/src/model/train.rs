// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch gradient descent (plain or Adam) on next-token NLL, used to
//! build toy models that have memorized a corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::param_grads;
use super::checkpoint::Checkpoint;
use super::tokenizer::TokenId;
use crate::error::{DemError, Result};

/// A training sequence whose loss covers tokens from `loss_from` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<TokenId>,
    /// Index of the first token that is scored (must be ≥ 1).
    pub loss_from: usize,
}

impl TrainSequence {
    pub fn new(tokens: Vec<TokenId>, loss_from: usize) -> Self {
        Self { tokens, loss_from }
    }

    /// Next-token targets aligned to positions: position `i` predicts
    /// `tokens[i + 1]` when `i + 1 >= loss_from`.
    pub fn targets(&self) -> Vec<Option<TokenId>> {
        (0..self.tokens.len())
            .map(|i| {
                let next = i + 1;
                (next < self.tokens.len() && next >= self.loss_from).then(|| self.tokens[next])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Sequences per step; `None` means full batch.
    pub batch_size: Option<usize>,
    /// Seeds the minibatch order.
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

fn default_optimizer() -> Optimizer {
    Optimizer::Sgd
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch NLL at each step, before the update.
    pub losses: Vec<f64>,
}

/// Mean over sequences of each sequence's mean target NLL.
pub fn corpus_nll(ckpt: &Checkpoint, corpus: &[TrainSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(DemError::InvalidInput("empty corpus".into()));
    }
    let mut total = 0.0;
    for s in corpus {
        let tape = super::forward::run(ckpt, &s.tokens, &[])?;
        total += super::backward::nll_and_dlogits(&tape.logits, &s.targets())?.0;
    }
    Ok(total / corpus.len() as f64)
}

/// Returns a trained copy of `ckpt`; the input is not modified.
pub fn train_toy(
    ckpt: &Checkpoint,
    corpus: &[TrainSequence],
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport)> {
    if corpus.is_empty() {
        return Err(DemError::InvalidInput("empty corpus".into()));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) && opts.steps > 0 {
        return Err(DemError::InvalidInput(format!("invalid learning rate {}", opts.lr)));
    }
    for (i, s) in corpus.iter().enumerate() {
        if s.loss_from == 0 || s.loss_from >= s.tokens.len() {
            return Err(DemError::InvalidInput(format!(
                "sequence {i}: loss_from {} outside 1..{}",
                s.loss_from,
                s.tokens.len()
            )));
        }
    }
    let batch = opts.batch_size.unwrap_or(corpus.len()).clamp(1, corpus.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();

    let mut model = ckpt.clone();
    let mut moments = match opts.optimizer {
        Optimizer::Adam { .. } => Some((model.zeros_like(), model.zeros_like())),
        Optimizer::Sgd => None,
    };
    let mut losses = Vec::with_capacity(opts.steps);
    for t in 1..=opts.steps {
        let mut acc = model.zeros_like();
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &corpus[order[cursor]];
            cursor += 1;
            let (nll, g) = param_grads(&model, &s.tokens, &s.targets())?;
            loss += nll;
            for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                a.add_assign(b)?;
            }
        }
        losses.push(loss / batch as f64);
        acc.tensors_mut()
            .into_iter()
            .for_each(|(_, g)| g.scale(1.0 / batch as f64));
        match (opts.optimizer, moments.as_mut()) {
            (Optimizer::Adam { beta1, beta2, eps }, Some((m, v))) => {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                let params = model.tensors_mut().into_iter().zip(acc.tensors());
                let state = m.tensors_mut().into_iter().zip(v.tensors_mut());
                for (((_, w), (_, g)), ((_, m), (_, v))) in params.zip(state) {
                    let (w, g) = (w.as_mut_slice(), g.as_slice());
                    let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
                    for i in 0..w.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        w[i] -= opts.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
            _ => {
                for ((_, w), (_, g)) in model.tensors_mut().into_iter().zip(acc.tensors()) {
                    w.scaled_add_assign(-opts.lr, g)?;
                }
            }
        }
    }
    if !model.tensors().iter().all(|(_, t)| t.is_finite()) {
        return Err(DemError::NonFinite("weights diverged during training".into()));
    }
    Ok((model, TrainReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn setup() -> (Checkpoint, Vec<TrainSequence>) {
        let c = init_model(&ModelConfig::new(10, 8, 2, 2, 8, 1)).unwrap();
        let corpus = vec![
            TrainSequence::new(vec![1, 2, 3, 4], 2),
            TrainSequence::new(vec![5, 6, 7, 8], 2),
        ];
        (c, corpus)
    }

    #[test]
    fn targets_align_with_loss_start() {
        let s = TrainSequence::new(vec![1, 2, 3, 4], 2);
        assert_eq!(s.targets(), vec![None, Some(3), Some(4), None]);
    }

    #[test]
    fn zero_steps_is_identity() {
        let (c, corpus) = setup();
        let opts = TrainOptions { steps: 0, lr: 0.1, batch_size: None, seed: 0, optimizer: Optimizer::Sgd };
        let (out, report) = train_toy(&c, &corpus, &opts).unwrap();
        assert!(out.bit_identical(&c));
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (c, corpus) = setup();
        let opts = TrainOptions { steps: 30, lr: 0.5, batch_size: Some(1), seed: 3, optimizer: Optimizer::Sgd };
        let (a, _) = train_toy(&c, &corpus, &opts).unwrap();
        let (b, _) = train_toy(&c, &corpus, &opts).unwrap();
        assert!(a.bit_identical(&b));
        assert!(corpus_nll(&a, &corpus).unwrap() < corpus_nll(&c, &corpus).unwrap());
        // input untouched
        assert!(c.bit_identical(&setup().0));
    }

    #[test]
    fn adam_reduces_loss() {
        let (c, corpus) = setup();
        let opts = TrainOptions {
            steps: 30,
            lr: 0.01,
            batch_size: None,
            seed: 0,
            optimizer: Optimizer::adam(),
        };
        let (a, report) = train_toy(&c, &corpus, &opts).unwrap();
        assert!(corpus_nll(&a, &corpus).unwrap() < 0.5 * report.losses[0]);
    }

    #[test]
    fn rejects_empty_corpus() {
        let (c, _) = setup();
        let opts = TrainOptions { steps: 1, lr: 0.1, batch_size: None, seed: 0, optimizer: Optimizer::Sgd };
        assert!(train_toy(&c, &[], &opts).is_err());
        let bad = [TrainSequence::new(vec![1, 2], 0)];
        assert!(train_toy(&c, &bad, &opts).is_err());
    }
}
