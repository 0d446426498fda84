// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, activation tape and interventions.
//!
//! Block wiring is pre-norm with a parallel residual:
//!
//! ```text
//! a^l = W_o^attn · Attn(LN1(h^{l-1}))
//! m^l = W_o^mlp  · GELU(W_in · LN2(h^{l-1}))
//! h^l = h^{l-1} + a^l + m^l
//! ```
//!
//! Interventions are applied where the site value is produced, before any
//! downstream computation reads it, and the tape stores post-intervention
//! values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::tokenizer::TokenId;
use crate::error::{DemError, Result};
use crate::numerics::{argmax, axpy, dot, Matrix, Vector};

/// What kind of hidden state a site addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Token + position embedding `h^0`; always layer 0.
    Embedding,
    /// Block output `h^l`.
    Block,
    /// Attention sublayer output `a^l`.
    Attn,
    /// MLP sublayer output `m^l`.
    Mlp,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Embedding => "embedding",
            SiteKind::Block => "block",
            SiteKind::Attn => "attn",
            SiteKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for SiteKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SiteKind {
    type Err = DemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(SiteKind::Embedding),
            "block" => Ok(SiteKind::Block),
            "attn" => Ok(SiteKind::Attn),
            "mlp" => Ok(SiteKind::Mlp),
            other => Err(DemError::InvalidInput(format!("unknown site kind `{other}`"))),
        }
    }
}

/// A single hidden-state location: `(layer, kind, token)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActivationSite {
    pub layer: usize,
    pub kind: SiteKind,
    pub token: usize,
}

impl ActivationSite {
    pub fn new(layer: usize, kind: SiteKind, token: usize) -> Self {
        Self { layer, kind, token }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InterventionAction {
    ReplaceWith(Vector),
    Add(Vector),
    /// Adds `N(0, sigma²)` noise drawn from a ChaCha8 stream seeded with
    /// `seed`.
    AddGaussianNoise { sigma: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub site: ActivationSite,
    pub action: InterventionAction,
}

impl Intervention {
    pub fn replace(site: ActivationSite, value: Vector) -> Self {
        Self {
            site,
            action: InterventionAction::ReplaceWith(value),
        }
    }

    pub fn add(site: ActivationSite, value: Vector) -> Self {
        Self {
            site,
            action: InterventionAction::Add(value),
        }
    }

    pub fn noise(site: ActivationSite, sigma: f64, seed: u64) -> Self {
        Self {
            site,
            action: InterventionAction::AddGaussianNoise { sigma, seed },
        }
    }

    fn apply(&self, row: &mut [f64]) {
        match &self.action {
            InterventionAction::ReplaceWith(v) => row.copy_from_slice(v),
            InterventionAction::Add(v) => axpy(1.0, v, row),
            InterventionAction::AddGaussianNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let normal = Normal::new(0.0, *sigma).expect("validated sigma");
                for x in row.iter_mut() {
                    *x += normal.sample(&mut rng);
                }
            }
        }
    }

    pub(crate) fn is_replace(&self) -> bool {
        matches!(self.action, InterventionAction::ReplaceWith(_))
    }
}

/// Checks every intervention against the model and sequence length.
pub fn validate_interventions(
    ckpt: &Checkpoint,
    seq_len: usize,
    interventions: &[Intervention],
) -> Result<()> {
    let d = ckpt.config.d_model;
    for iv in interventions {
        let s = iv.site;
        if s.layer >= ckpt.config.n_layers {
            return Err(DemError::Intervention(format!(
                "layer {} out of range for {} layers",
                s.layer, ckpt.config.n_layers
            )));
        }
        if s.kind == SiteKind::Embedding && s.layer != 0 {
            return Err(DemError::Intervention("embedding sites use layer 0".into()));
        }
        if s.token >= seq_len {
            return Err(DemError::Intervention(format!(
                "token {} out of range for sequence of length {seq_len}",
                s.token
            )));
        }
        match &iv.action {
            InterventionAction::ReplaceWith(v) | InterventionAction::Add(v) => {
                if v.len() != d {
                    return Err(DemError::Intervention(format!(
                        "vector of length {} at a site of width {d}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(DemError::Intervention("non-finite intervention vector".into()));
                }
            }
            InterventionAction::AddGaussianNoise { sigma, .. } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(DemError::Intervention(format!("invalid noise sigma {sigma}")));
                }
            }
        }
    }
    Ok(())
}

/// Per-token record of one forward run. Matrices are `T × width`, one per
/// layer.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    /// `h^{l-1}`, the block input (`block_in[0]` is the embedding).
    pub block_in: Vec<Matrix>,
    /// `a^l`.
    pub attn_out: Vec<Matrix>,
    /// `m^l`.
    pub mlp_out: Vec<Matrix>,
    /// `h^l`.
    pub block_out: Vec<Matrix>,
    /// Concatenated head outputs, the input to `W_o^attn`.
    pub attn_mix: Vec<Matrix>,
    /// GELU activations, the input to `W_o^mlp`.
    pub mlp_hidden: Vec<Matrix>,
    pub logits: Matrix,
    pub(crate) cache: ForwardCache,
}

impl ActivationTape {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    /// Value recorded at a site.
    pub fn site(&self, site: ActivationSite) -> &[f64] {
        let m = match site.kind {
            SiteKind::Embedding => &self.block_in[0],
            SiteKind::Block => &self.block_out[site.layer],
            SiteKind::Attn => &self.attn_out[site.layer],
            SiteKind::Mlp => &self.mlp_out[site.layer],
        };
        m.row(site.token)
    }

    /// Input to the output projection of the given sublayer (the "key").
    pub fn key(&self, layer: usize, kind: SiteKind, token: usize) -> Option<&[f64]> {
        match kind {
            SiteKind::Attn => Some(self.attn_mix[layer].row(token)),
            SiteKind::Mlp => Some(self.mlp_hidden[layer].row(token)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub x1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities per head, `T × T` (upper triangle zero).
    pub probs: Vec<Matrix>,
    pub ln2: LnCache,
    pub x2: Matrix,
    pub mlp_pre: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub lnf: LnCache,
    pub xf: Matrix,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (g, b) = (gamma.as_slice(), beta.as_slice());
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = g[j] * xhat.get(i, j) + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Applies the final layer norm and unembedding to one hidden state.
pub fn unembed(ckpt: &Checkpoint, h: &[f64]) -> Result<Vector> {
    let x = Matrix::from_vec(1, h.len(), h.to_vec())?;
    let (xf, _) = layer_norm(&x, &ckpt.lnf_gamma, &ckpt.lnf_beta, ckpt.config.ln_epsilon);
    ckpt.w_u.vec_mul(xf.row(0))
}

fn apply_at(interventions: &[Intervention], kind: SiteKind, layer: usize, m: &mut Matrix) {
    for iv in interventions {
        if iv.site.kind == kind && iv.site.layer == layer {
            iv.apply(m.row_mut(iv.site.token));
        }
    }
}

fn check_tokens(ckpt: &Checkpoint, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(DemError::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > ckpt.config.max_seq {
        return Err(DemError::InvalidInput(format!(
            "sequence of length {} exceeds max_seq {}",
            tokens.len(),
            ckpt.config.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= ckpt.config.vocab_size) {
        return Err(DemError::InvalidInput(format!(
            "token id {bad} outside vocabulary of size {}",
            ckpt.config.vocab_size
        )));
    }
    Ok(())
}

/// Runs the model over `tokens` with interventions; returns final logits
/// (`T × vocab`) and the activation tape.
pub fn forward(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    interventions: &[Intervention],
) -> Result<(Matrix, ActivationTape)> {
    let tape = run(ckpt, tokens, interventions)?;
    Ok((tape.logits.clone(), tape))
}

pub(crate) fn run(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    interventions: &[Intervention],
) -> Result<ActivationTape> {
    check_tokens(ckpt, tokens)?;
    validate_interventions(ckpt, tokens.len(), interventions)?;
    let cfg = &ckpt.config;
    let (t, d) = (tokens.len(), cfg.d_model);
    let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = h.row_mut(i);
        row.copy_from_slice(ckpt.tok_emb.row(tok as usize));
        axpy(1.0, ckpt.pos_emb.row(i), row);
    }
    apply_at(interventions, SiteKind::Embedding, 0, &mut h);

    let n_layers = cfg.n_layers;
    let mut tape_in = Vec::with_capacity(n_layers);
    let mut tape_attn = Vec::with_capacity(n_layers);
    let mut tape_mlp = Vec::with_capacity(n_layers);
    let mut tape_out = Vec::with_capacity(n_layers);
    let mut tape_mix = Vec::with_capacity(n_layers);
    let mut tape_hidden = Vec::with_capacity(n_layers);
    let mut caches = Vec::with_capacity(n_layers);

    for (l, w) in ckpt.layers.iter().enumerate() {
        // attention
        let (x1, ln1) = layer_norm(&h, &w.ln1_gamma, &w.ln1_beta, cfg.ln_epsilon);
        let q = x1.matmul(&w.w_q)?;
        let k = x1.matmul(&w.w_k)?;
        let v = x1.matmul(&w.w_v)?;
        let mut mix = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let off = head * dh;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(i)[off..off + dh];
                let pr = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                    pr[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in pr.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in pr.iter_mut().take(i + 1) {
                    *pj /= z;
                }
                let mr = &mut mix.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    axpy(pr[j], &v.row(j)[off..off + dh], mr);
                }
            }
            probs.push(p);
        }
        let mut a = mix.matmul(&w.w_o_attn)?;
        apply_at(interventions, SiteKind::Attn, l, &mut a);

        // mlp
        let (x2, ln2) = layer_norm(&h, &w.ln2_gamma, &w.ln2_beta, cfg.ln_epsilon);
        let pre = x2.matmul(&w.w_in)?;
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
        let mut m = hidden.matmul(&w.w_o_mlp)?;
        apply_at(interventions, SiteKind::Mlp, l, &mut m);

        let mut out = h.clone();
        out.add_assign(&a)?;
        out.add_assign(&m)?;
        apply_at(interventions, SiteKind::Block, l, &mut out);

        caches.push(LayerCache {
            ln1,
            x1,
            q,
            k,
            v,
            probs,
            ln2,
            x2,
            mlp_pre: pre,
        });
        tape_in.push(h);
        tape_attn.push(a);
        tape_mlp.push(m);
        tape_mix.push(mix);
        tape_hidden.push(hidden);
        h = out.clone();
        tape_out.push(out);
    }

    let (xf, lnf) = layer_norm(&h, &ckpt.lnf_gamma, &ckpt.lnf_beta, cfg.ln_epsilon);
    let logits = xf.matmul(&ckpt.w_u)?;
    if !logits.is_finite() {
        return Err(DemError::NonFinite("logits".into()));
    }

    Ok(ActivationTape {
        block_in: tape_in,
        attn_out: tape_attn,
        mlp_out: tape_mlp,
        block_out: tape_out,
        attn_mix: tape_mix,
        mlp_hidden: tape_hidden,
        logits,
        cache: ForwardCache {
            tokens: tokens.to_vec(),
            layers: caches,
            lnf,
            xf,
        },
    })
}

/// Greedy decoding with lowest-id tie-breaking. Interventions are applied
/// on every step; their token indices must address prompt positions.
/// Stops after `max_new` tokens or when `stop` is produced (the stop token
/// is not returned).
pub fn generate_greedy(
    ckpt: &Checkpoint,
    prompt: &[TokenId],
    max_new: usize,
    stop: Option<TokenId>,
    interventions: &[Intervention],
) -> Result<Vec<TokenId>> {
    if prompt.is_empty() {
        return Err(DemError::InvalidInput("empty prompt".into()));
    }
    if prompt.len() + max_new > ckpt.config.max_seq {
        return Err(DemError::InvalidInput(format!(
            "prompt length {} plus {max_new} new tokens exceeds max_seq {}",
            prompt.len(),
            ckpt.config.max_seq
        )));
    }
    validate_interventions(ckpt, prompt.len(), interventions)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let tape = run(ckpt, &seq, interventions)?;
        let next = argmax(tape.logits.row(seq.len() - 1)) as TokenId;
        if Some(next) == stop {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn model() -> Checkpoint {
        init_model(&ModelConfig::new(13, 8, 3, 2, 10, 5)).unwrap()
    }

    fn amplified() -> Checkpoint {
        // Larger weights so interventions visibly move downstream values.
        let mut c = model();
        for (_, t) in c.tensors_mut() {
            t.scale(20.0);
        }
        c
    }

    #[test]
    fn forward_is_deterministic() {
        let c = model();
        let (a, ta) = forward(&c, &[1, 2, 3], &[]).unwrap();
        let (b, tb) = forward(&c, &[1, 2, 3], &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.block_out, tb.block_out);
        assert_eq!(a.shape(), (3, 13));
    }

    #[test]
    fn residual_identity_holds() {
        let c = amplified();
        let (_, tape) = forward(&c, &[4, 0, 7, 2, 9], &[]).unwrap();
        for l in 0..3 {
            for i in 0..5 {
                for j in 0..8 {
                    let r = tape.block_out[l].get(i, j)
                        - tape.block_in[l].get(i, j)
                        - tape.attn_out[l].get(i, j)
                        - tape.mlp_out[l].get(i, j);
                    assert!(r.abs() < 1e-9);
                }
            }
            if l > 0 {
                assert_eq!(tape.block_in[l], tape.block_out[l - 1]);
            }
        }
    }

    #[test]
    fn replacing_with_clean_value_is_identity() {
        let c = amplified();
        let toks = [3, 1, 4, 1, 5];
        let (clean, tape) = forward(&c, &toks, &[]).unwrap();
        for kind in [SiteKind::Block, SiteKind::Attn, SiteKind::Mlp, SiteKind::Embedding] {
            let layer = if kind == SiteKind::Embedding { 0 } else { 1 };
            let site = ActivationSite::new(layer, kind, 2);
            let iv = Intervention::replace(site, tape.site(site).to_vec());
            let (patched, _) = forward(&c, &toks, &[iv]).unwrap();
            assert_eq!(patched, clean);
        }
    }

    #[test]
    fn intervention_locality() {
        let c = amplified();
        let toks = [3, 1, 4, 1, 5, 9];
        let (_, clean) = forward(&c, &toks, &[]).unwrap();
        let site = ActivationSite::new(1, SiteKind::Mlp, 2);
        let iv = Intervention::add(site, vec![1.0; 8]);
        let (_, t) = forward(&c, &toks, &[iv]).unwrap();
        // layers below are untouched
        assert_eq!(t.block_out[0], clean.block_out[0]);
        assert_eq!(t.attn_out[0], clean.attn_out[0]);
        // within the layer, attention inputs are unchanged
        assert_eq!(t.block_in[1], clean.block_in[1]);
        assert_eq!(t.attn_out[1], clean.attn_out[1]);
        // earlier tokens unchanged everywhere
        for l in 0..3 {
            for i in 0..2 {
                assert_eq!(t.block_out[l].row(i), clean.block_out[l].row(i));
            }
        }
        assert_ne!(t.block_out[1].row(2), clean.block_out[1].row(2));
    }

    #[test]
    fn causality() {
        let c = amplified();
        let (_, a) = forward(&c, &[3, 1, 4, 1, 5], &[]).unwrap();
        let (_, b) = forward(&c, &[3, 1, 4, 8, 5], &[]).unwrap();
        for l in 0..3 {
            for i in 0..3 {
                assert_eq!(a.block_out[l].row(i), b.block_out[l].row(i));
            }
        }
    }

    #[test]
    fn tape_records_post_intervention_values() {
        let c = model();
        let site = ActivationSite::new(2, SiteKind::Attn, 1);
        let v = vec![0.5; 8];
        let (_, t) = forward(&c, &[1, 2, 3], &[Intervention::replace(site, v.clone())]).unwrap();
        assert_eq!(t.site(site), v.as_slice());
    }

    #[test]
    fn noise_is_seeded() {
        let c = model();
        let site = ActivationSite::new(0, SiteKind::Embedding, 0);
        let run = |seed| forward(&c, &[1, 2], &[Intervention::noise(site, 0.5, seed)]).unwrap().0;
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        let (zero, _) = forward(&c, &[1, 2], &[Intervention::noise(site, 0.0, 1)]).unwrap();
        assert_eq!(zero, forward(&c, &[1, 2], &[]).unwrap().0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = model();
        assert!(forward(&c, &[], &[]).is_err());
        assert!(forward(&c, &[13], &[]).is_err());
        assert!(forward(&c, &[1; 11], &[]).is_err());
        let bad_layer = Intervention::add(ActivationSite::new(3, SiteKind::Mlp, 0), vec![0.0; 8]);
        assert!(forward(&c, &[1], &[bad_layer]).is_err());
        let bad_tok = Intervention::add(ActivationSite::new(0, SiteKind::Mlp, 2), vec![0.0; 8]);
        assert!(forward(&c, &[1, 2], &[bad_tok]).is_err());
        let bad_dim = Intervention::add(ActivationSite::new(0, SiteKind::Mlp, 0), vec![0.0; 3]);
        assert!(forward(&c, &[1], &[bad_dim]).is_err());
        let bad_emb = Intervention::add(ActivationSite::new(1, SiteKind::Embedding, 0), vec![0.0; 8]);
        assert!(forward(&c, &[1], &[bad_emb]).is_err());
    }

    #[test]
    fn generate_contract() {
        let c = model();
        assert!(generate_greedy(&c, &[1, 2], 0, None, &[]).unwrap().is_empty());
        let a = generate_greedy(&c, &[1, 2], 5, None, &[]).unwrap();
        assert_eq!(a, generate_greedy(&c, &[1, 2], 5, None, &[]).unwrap());
        assert_eq!(a.len(), 5);
        assert!(generate_greedy(&c, &[1, 2], 9, None, &[]).is_err());
        assert!(generate_greedy(&c, &[], 1, None, &[]).is_err());
        // stopping at the first generated token yields nothing
        let stop = a[0];
        assert!(generate_greedy(&c, &[1, 2], 5, Some(stop), &[]).unwrap().is_empty());
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
