// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter set of the toy transformer and its on-disk format.
//!
//! Weights use the row-vector convention `y = x · W`, so `W` is stored as
//! `(in × out)`: `w_o_mlp` is `d_mlp × d_model`, `w_u` is
//! `d_model × vocab`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::config::ModelConfig;
use crate::container::{parse_container, write_container};
use crate::error::{DemError, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KSCK";

const INIT_STD: f64 = 0.02;

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Attention output projection.
    pub w_o_attn: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    /// MLP input projection.
    pub w_in: Matrix,
    /// MLP output projection.
    pub w_o_mlp: Matrix,
}

/// Full parameter set plus architecture config.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lnf_gamma: Matrix,
    pub lnf_beta: Matrix,
    /// Unembedding, untied from `tok_emb`.
    pub w_u: Matrix,
}

fn ones_row(n: usize) -> Matrix {
    Matrix::from_vec(1, n, vec![1.0; n]).expect("shape")
}

impl Checkpoint {
    /// Seeded Gaussian init (std 0.02), layer norms at identity.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape")
        };
        let (d, dm, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let tok_emb = gauss(v, d);
        let pos_emb = gauss(config.max_seq, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gamma: ones_row(d),
                ln1_beta: Matrix::zeros(1, d),
                w_q: gauss(d, d),
                w_k: gauss(d, d),
                w_v: gauss(d, d),
                w_o_attn: gauss(d, d),
                ln2_gamma: ones_row(d),
                ln2_beta: Matrix::zeros(1, d),
                w_in: gauss(d, dm),
                w_o_mlp: gauss(dm, d),
            })
            .collect();
        let w_u = gauss(d, v);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gamma: ones_row(d),
            lnf_beta: Matrix::zeros(1, d),
            w_u,
        })
    }

    /// Same shapes as `self`, every value zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// All tensors with their manifest names, in manifest order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{l}.ln1.gamma"), &w.ln1_gamma),
                (format!("layers.{l}.ln1.beta"), &w.ln1_beta),
                (format!("layers.{l}.attn.w_q"), &w.w_q),
                (format!("layers.{l}.attn.w_k"), &w.w_k),
                (format!("layers.{l}.attn.w_v"), &w.w_v),
                (format!("layers.{l}.attn.w_o"), &w.w_o_attn),
                (format!("layers.{l}.ln2.gamma"), &w.ln2_gamma),
                (format!("layers.{l}.ln2.beta"), &w.ln2_beta),
                (format!("layers.{l}.mlp.w_in"), &w.w_in),
                (format!("layers.{l}.mlp.w_o"), &w.w_o_mlp),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), &self.lnf_gamma),
            ("ln_f.beta".to_string(), &self.lnf_beta),
            ("w_u".to_string(), &self.w_u),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, w) in self.layers.iter_mut().enumerate() {
            out.extend([
                (format!("layers.{l}.ln1.gamma"), &mut w.ln1_gamma),
                (format!("layers.{l}.ln1.beta"), &mut w.ln1_beta),
                (format!("layers.{l}.attn.w_q"), &mut w.w_q),
                (format!("layers.{l}.attn.w_k"), &mut w.w_k),
                (format!("layers.{l}.attn.w_v"), &mut w.w_v),
                (format!("layers.{l}.attn.w_o"), &mut w.w_o_attn),
                (format!("layers.{l}.ln2.gamma"), &mut w.ln2_gamma),
                (format!("layers.{l}.ln2.beta"), &mut w.ln2_beta),
                (format!("layers.{l}.mlp.w_in"), &mut w.w_in),
                (format!("layers.{l}.mlp.w_o"), &mut w.w_o_mlp),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), &mut self.lnf_gamma),
            ("ln_f.beta".to_string(), &mut self.lnf_beta),
            ("w_u".to_string(), &mut self.w_u),
        ]);
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Expected `(rows, cols)` for every manifest name, derived from config.
    fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (d, dm, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), (v, d)),
            ("pos_emb".to_string(), (config.max_seq, d)),
        ];
        for l in 0..config.n_layers {
            out.extend([
                (format!("layers.{l}.ln1.gamma"), (1, d)),
                (format!("layers.{l}.ln1.beta"), (1, d)),
                (format!("layers.{l}.attn.w_q"), (d, d)),
                (format!("layers.{l}.attn.w_k"), (d, d)),
                (format!("layers.{l}.attn.w_v"), (d, d)),
                (format!("layers.{l}.attn.w_o"), (d, d)),
                (format!("layers.{l}.ln2.gamma"), (1, d)),
                (format!("layers.{l}.ln2.beta"), (1, d)),
                (format!("layers.{l}.mlp.w_in"), (d, dm)),
                (format!("layers.{l}.mlp.w_o"), (dm, d)),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), (1, d)),
            ("ln_f.beta".to_string(), (1, d)),
            ("w_u".to_string(), (d, v)),
        ]);
        out
    }

    /// Checks every tensor shape against the config and that all values
    /// are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Self::expected_shapes(&self.config);
        let actual = self.tensors();
        if expected.len() != actual.len() {
            return Err(DemError::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(&actual) {
            if en != an || *es != at.shape() {
                return Err(DemError::Format(format!(
                    "tensor {an} has shape {:?}, expected {en} with {:?}",
                    at.shape(),
                    es
                )));
            }
            if !at.is_finite() {
                return Err(DemError::NonFinite(format!("tensor {an}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_container(
            &mut out,
            CHECKPOINT_MAGIC,
            json!({ "config": self.config }),
            &self.tensors(),
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = parse_container(bytes, CHECKPOINT_MAGIC)?;
        let config: ModelConfig = serde_json::from_value(
            container
                .header
                .get("config")
                .cloned()
                .ok_or_else(|| DemError::Format("checkpoint header has no config".into()))?,
        )
        .map_err(|e| DemError::Format(format!("bad config in header: {e}")))?;
        config.validate()?;

        let expected = Self::expected_shapes(&config);
        if expected.len() != container.tensors.len() {
            return Err(DemError::Format(format!(
                "config implies {} tensors, file has {}",
                expected.len(),
                container.tensors.len()
            )));
        }
        // Start from a correctly shaped skeleton and move tensors in.
        let mut ckpt = Self::skeleton(&config);
        for ((en, es), (name, tensor)) in expected.iter().zip(container.tensors) {
            if *en != name || *es != tensor.shape() {
                return Err(DemError::Format(format!(
                    "tensor {name} {:?} does not match expected {en} {:?}",
                    tensor.shape(),
                    es
                )));
            }
            *ckpt.tensor_mut(&name).expect("skeleton has every tensor") = tensor;
        }
        Ok(ckpt)
    }

    fn skeleton(config: &ModelConfig) -> Self {
        let (d, dm, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let z = Matrix::zeros;
        Self {
            config: config.clone(),
            tok_emb: z(v, d),
            pos_emb: z(config.max_seq, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights {
                    ln1_gamma: z(1, d),
                    ln1_beta: z(1, d),
                    w_q: z(d, d),
                    w_k: z(d, d),
                    w_v: z(d, d),
                    w_o_attn: z(d, d),
                    ln2_gamma: z(1, d),
                    ln2_beta: z(1, d),
                    w_in: z(d, dm),
                    w_o_mlp: z(dm, d),
                })
                .collect(),
            lnf_gamma: z(1, d),
            lnf_beta: z(1, d),
            w_u: z(d, v),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_container(
            f,
            CHECKPOINT_MAGIC,
            json!({ "config": self.config }),
            &self.tensors(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut BufReader::new(File::open(path)?), &mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Bitwise equality of every tensor (distinguishes `0.0` from `-0.0`).
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|((na, a), (nb, b))| {
                    na == &nb
                        && a.shape() == b.shape()
                        && a.as_slice()
                            .iter()
                            .zip(b.as_slice())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Builds a seeded checkpoint.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    Checkpoint::init(config)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
