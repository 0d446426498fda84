// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge editing: pick the layers whose block most rotates the residual
//! stream, optimize a residual shift that makes the model emit the new
//! target, then write that shift into the MLP and attention output
//! projections with a covariance-regularized least-squares update.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::container::{parse_container, write_container};
use crate::dataset::{locate, CKRecord, EncodedCase, PERSON_NAMES};
use crate::error::{DemError, Result};
use crate::model::{
    backward_pass, nll_and_dlogits, run, ActivationSite, Checkpoint, Intervention, SiteKind,
    TokenId, Vocabulary,
};
use crate::numerics::{cosine_similarity, log_softmax, norm, softmax, spd_solve, Matrix, Vector};

pub const RECEIPT_MAGIC: &[u8; 4] = b"KSRC";

/// Layers chosen for editing, in rank order (smallest `|cos|` first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// `(layer, |cos(h_in, h_out)|)`.
    pub entries: Vec<(usize, f64)>,
    pub kinds: Vec<SiteKind>,
}

impl LayerSelection {
    /// Selected layers in ascending index order (the edit order).
    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        l.sort_unstable();
        l
    }

    pub fn deepest(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.0).max()
    }
}

/// Ranks layers by `|cosine|` ascending (ties to the lower index) and keeps
/// the first `k`.
pub fn rank_by_cosine(cosines: &[f64], k: usize) -> Result<LayerSelection> {
    if k == 0 || k > cosines.len() {
        return Err(DemError::InvalidInput(format!(
            "k = {k} outside 1..={}",
            cosines.len()
        )));
    }
    if let Some(c) = cosines.iter().find(|c| !c.is_finite()) {
        return Err(DemError::NonFinite(format!("cosine {c}")));
    }
    let mut order: Vec<(usize, f64)> = cosines.iter().map(|c| c.abs()).enumerate().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    order.truncate(k);
    Ok(LayerSelection {
        entries: order,
        kinds: vec![SiteKind::Mlp, SiteKind::Attn],
    })
}

/// Cosine between each layer's block input and output.
pub fn layer_cosines(pairs: &[(Vector, Vector)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(h_in, h_out)| cosine_similarity(h_in, h_out))
        .collect()
}

/// Clean forward over `prompt`; ranks layers by how little the block output
/// at the last token aligns with its input.
pub fn select_layers(ckpt: &Checkpoint, prompt: &[TokenId], k: usize) -> Result<LayerSelection> {
    select_among(ckpt, prompt, k, ckpt.config.n_layers)
}

/// As [`select_layers`] over layers `0..n_candidates` only.
fn select_among(
    ckpt: &Checkpoint,
    prompt: &[TokenId],
    k: usize,
    n_candidates: usize,
) -> Result<LayerSelection> {
    if prompt.is_empty() {
        return Err(DemError::InvalidInput("empty prompt".into()));
    }
    let tape = run(ckpt, prompt, &[])?;
    let last = prompt.len() - 1;
    let pairs: Vec<(Vector, Vector)> = (0..n_candidates)
        .map(|l| {
            (
                tape.block_in[l].row(last).to_vec(),
                tape.block_out[l].row(last).to_vec(),
            )
        })
        .collect();
    rank_by_cosine(&layer_cosines(&pairs)?, k)
}

/// Second-moment statistics of the keys entering one output projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStats {
    pub layer: usize,
    pub kind: SiteKind,
    /// `μ · E[k kᵀ]`.
    pub c0: Matrix,
    pub samples: usize,
    pub mu: f64,
}

impl CovarianceStats {
    /// Fewer keys than dimensions: `C_0` is rank deficient.
    pub fn is_underdetermined(&self) -> bool {
        self.samples < self.c0.rows()
    }
}

/// `μ/N · Σ k kᵀ` over the rows of `keys` (`N × d`).
pub fn covariance_from_keys(keys: &Matrix, mu: f64) -> Result<Matrix> {
    if keys.rows() == 0 {
        return Err(DemError::InvalidInput("no keys".into()));
    }
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(DemError::InvalidInput(format!("μ must be finite and ≥ 0, got {mu}")));
    }
    let mut c = keys.t_matmul(keys)?;
    c.scale(mu / keys.rows() as f64);
    Ok(c)
}

fn check_site(ckpt: &Checkpoint, layer: usize, kind: SiteKind) -> Result<()> {
    if layer >= ckpt.config.n_layers {
        return Err(DemError::InvalidInput(format!(
            "layer {layer} outside 0..{}",
            ckpt.config.n_layers
        )));
    }
    if !matches!(kind, SiteKind::Mlp | SiteKind::Attn) {
        return Err(DemError::InvalidInput(format!("{kind} has no output projection")));
    }
    Ok(())
}

/// Keys at every position of every corpus sequence, for all layers and both
/// projections, in one pass.
fn collect_keys(
    ckpt: &Checkpoint,
    corpus: &[Vec<TokenId>],
) -> Result<BTreeMap<(usize, SiteKind), Matrix>> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(DemError::InvalidInput("empty covariance corpus".into()));
    }
    let cfg = &ckpt.config;
    let mut rows: BTreeMap<(usize, SiteKind), Vec<f64>> = BTreeMap::new();
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let tape = run(ckpt, seq, &[])?;
        for l in 0..cfg.n_layers {
            rows.entry((l, SiteKind::Mlp))
                .or_default()
                .extend_from_slice(tape.mlp_hidden[l].as_slice());
            rows.entry((l, SiteKind::Attn))
                .or_default()
                .extend_from_slice(tape.attn_mix[l].as_slice());
        }
    }
    rows.into_iter()
        .map(|((l, kind), data)| {
            let d = if kind == SiteKind::Mlp { cfg.d_mlp } else { cfg.d_model };
            Ok(((l, kind), Matrix::from_vec(data.len() / d, d, data)?))
        })
        .collect()
}

/// Keys are the inputs to the site's output weight (post-GELU hidden for
/// the MLP, the head-concatenated attention mix for attention) at every
/// token position of `corpus`.
pub fn compute_covariance(
    ckpt: &Checkpoint,
    corpus: &[Vec<TokenId>],
    layer: usize,
    kind: SiteKind,
    mu: f64,
) -> Result<CovarianceStats> {
    check_site(ckpt, layer, kind)?;
    let keys = collect_keys(ckpt, corpus)?.remove(&(layer, kind)).expect("all sites collected");
    Ok(CovarianceStats {
        layer,
        kind,
        c0: covariance_from_keys(&keys, mu)?,
        samples: keys.rows(),
        mu,
    })
}

/// Lazily computed covariance statistics for every site.
///
/// Statistics come from the checkpoint passed on first use, so sequential
/// edits keep regularizing toward the original model's keys.
#[derive(Debug, Clone)]
pub struct CovarianceCache {
    corpus: Vec<Vec<TokenId>>,
    mu: f64,
    stats: BTreeMap<(usize, SiteKind), CovarianceStats>,
}

impl CovarianceCache {
    pub fn new(corpus: Vec<Vec<TokenId>>, mu: f64) -> Self {
        Self {
            corpus,
            mu,
            stats: BTreeMap::new(),
        }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn get(&mut self, ckpt: &Checkpoint, layer: usize, kind: SiteKind) -> Result<&CovarianceStats> {
        check_site(ckpt, layer, kind)?;
        if self.stats.is_empty() {
            for ((l, k), keys) in collect_keys(ckpt, &self.corpus)? {
                let stats = CovarianceStats {
                    layer: l,
                    kind: k,
                    c0: covariance_from_keys(&keys, self.mu)?,
                    samples: keys.rows(),
                    mu: self.mu,
                };
                self.stats.insert((l, k), stats);
            }
        }
        self.stats
            .get(&(layer, kind))
            .ok_or_else(|| DemError::Dimension(format!("no statistics for layer {layer}")))
    }
}

/// Sequences for covariance estimation: every prompt of every record, with
/// the known answer appended to the main prompt when there is one.
pub fn covariance_corpus(records: &[CKRecord], vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for r in records {
        let mut main = vocab.encode(&r.prompt);
        if let Some(t) = &r.target_true {
            main.extend(vocab.encode(t));
        }
        out.push(main);
        for p in r
            .paraphrase_prompts
            .iter()
            .chain(&r.neighborhood_prompts)
            .chain(&r.sub_neighborhood_prompts)
        {
            out.push(vocab.encode(p));
        }
    }
    out
}

/// `Δ = R K1ᵀ (C_0 + K1 K1ᵀ)⁻¹` (`out × key`); columns of `r` and `k1` are
/// the individual edits.
pub fn compute_delta_weights(r: &Matrix, k1: &Matrix, c0: &CovarianceStats) -> Result<Matrix> {
    delta_from_c0(r, k1, &c0.c0)
}

fn delta_from_c0(r: &Matrix, k1: &Matrix, c0: &Matrix) -> Result<Matrix> {
    if r.cols() != k1.cols() {
        return Err(DemError::Dimension(format!(
            "R has {} columns, K1 has {}",
            r.cols(),
            k1.cols()
        )));
    }
    if c0.shape() != (k1.rows(), k1.rows()) {
        return Err(DemError::Dimension(format!(
            "C0 is {:?}, keys have dimension {}",
            c0.shape(),
            k1.rows()
        )));
    }
    let mut a = k1.matmul_t(k1)?;
    a.add_assign(c0)?;
    // A X = K1 Rᵀ, so Xᵀ = R K1ᵀ A⁻¹ (A symmetric)
    let rhs = k1.matmul_t(r)?;
    Ok(spd_solve(&a, &rhs)?.x.transpose())
}

/// Hyperparameters of the residual-shift optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaOptimConfig {
    /// Weight of the KL term.
    pub alpha: f64,
    /// Weight of the target NLL.
    pub beta: f64,
    pub steps: usize,
    pub step_size: f64,
    /// `‖δ‖` is kept at most `clamp · ‖h‖`.
    pub clamp: f64,
    /// Number of prompt variants the target NLL is averaged over.
    pub prefixes: usize,
}

impl Default for DeltaOptimConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0625,
            beta: 1.0,
            steps: 25,
            step_size: 0.5,
            clamp: 4.0,
            prefixes: 4,
        }
    }
}

impl DeltaOptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DemError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be ≥ 0, got {}", self.beta));
        }
        if self.steps == 0 {
            return bad("steps must be ≥ 1".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be > 0, got {}", self.step_size));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return bad(format!("clamp must be > 0, got {}", self.clamp));
        }
        if self.prefixes == 0 {
            return bad("prefixes must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Token whose hidden state serves as the edit key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyPosition {
    /// Last token of the subject span.
    SubjectLast,
    /// Last token of the prompt.
    #[default]
    LastToken,
}

impl KeyPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyPosition::SubjectLast => "subject-last",
            KeyPosition::LastToken => "last-token",
        }
    }

    fn pick(self, tokens: &[TokenId], subject_last: usize) -> usize {
        match self {
            KeyPosition::SubjectLast => subject_last,
            KeyPosition::LastToken => tokens.len() - 1,
        }
    }
}

impl fmt::Display for KeyPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeyPosition {
    type Err = DemError;

    fn from_str(s: &str) -> Result<Self> {
        [KeyPosition::SubjectLast, KeyPosition::LastToken]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                DemError::Config(format!(
                    "unknown key position `{s}` (expected subject-last or last-token)"
                ))
            })
    }
}

/// A prompt variant and the position its key is read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditVariant {
    pub tokens: Vec<TokenId>,
    pub position: usize,
}

/// A tokenized edit: prompt variants with their key positions, the new
/// answer (terminated by `<eot>`) and the prompt whose next-token
/// distribution the KL term preserves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditRequest {
    pub case_id: u64,
    pub key_position: KeyPosition,
    /// `variants[0]` is the record prompt itself.
    pub variants: Vec<EditVariant>,
    pub target: Vec<TokenId>,
    pub kl_prompt: Vec<TokenId>,
}

impl EditRequest {
    /// Variants: the prompt, its paraphrases, then copies with `PersonX`
    /// replaced by person names; the first `prefixes` are kept. The KL prompt
    /// is the prompt cut after the subject.
    pub fn from_record(
        record: &CKRecord,
        vocab: &Vocabulary,
        prefixes: usize,
        key_position: KeyPosition,
    ) -> Result<Self> {
        let case = EncodedCase::encode(record, vocab)?;
        let variant = |tokens: Vec<TokenId>, subject_last: usize| EditVariant {
            position: key_position.pick(&tokens, subject_last),
            tokens,
        };
        let mut variants = vec![variant(case.prompt.clone(), case.subject_last())];
        variants.extend(
            case.located_paraphrases()
                .into_iter()
                .map(|p| variant(p.tokens, p.subject_last)),
        );
        if record.subject.text.split(' ').any(|w| w == "PersonX") {
            for name in PERSON_NAMES {
                if variants.len() >= prefixes {
                    break;
                }
                if vocab.id(name).is_none() {
                    continue;
                }
                let sub = EncodedCase::encode(&record.substitute("PersonX", name)?, vocab)?;
                variants.push(variant(sub.prompt.clone(), sub.subject_last()));
            }
        }
        variants.truncate(prefixes.max(1));
        let mut target = case.target_new.clone();
        target.push(vocab.eot());
        Ok(Self {
            case_id: record.case_id,
            key_position,
            variants,
            target,
            kl_prompt: case.prompt[..case.subject.1].to_vec(),
        })
    }

    /// Single-variant request from raw tokens; the subject must occur in
    /// the prompt.
    pub fn from_tokens(
        prompt: Vec<TokenId>,
        subject: &[TokenId],
        target: Vec<TokenId>,
        key_position: KeyPosition,
    ) -> Result<Self> {
        let (_, end) = locate(&prompt, subject)
            .ok_or_else(|| DemError::InvalidInput("subject not found in prompt".into()))?;
        Ok(Self {
            case_id: 0,
            key_position,
            kl_prompt: prompt[..end].to_vec(),
            variants: vec![EditVariant {
                position: key_position.pick(&prompt, end - 1),
                tokens: prompt,
            }],
            target,
        })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.variants[0].tokens
    }
}

/// Loss and gradients of the shift objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaObjective {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grad_mlp: Vector,
    pub grad_attn: Vector,
}

/// The shift objective for one edit at one layer: `β · mean NLL(target)`
/// over prompt variants plus `α · KL(edited ‖ original)` on the KL prompt,
/// with `δ_mlp` / `δ_attn` added to the sublayer outputs at each variant's
/// key position (the last token of the KL prompt).
pub struct DeltaProblem<'a> {
    ckpt: &'a Checkpoint,
    req: &'a EditRequest,
    layer: usize,
    cfg: &'a DeltaOptimConfig,
    original_logp: Vector,
}

impl<'a> DeltaProblem<'a> {
    pub fn new(
        ckpt: &'a Checkpoint,
        req: &'a EditRequest,
        layer: usize,
        cfg: &'a DeltaOptimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if req.target.is_empty() {
            return Err(DemError::InvalidInput("empty target".into()));
        }
        if req.variants.is_empty() || req.kl_prompt.is_empty() {
            return Err(DemError::InvalidInput("edit request has no prompt".into()));
        }
        if layer >= ckpt.config.n_layers {
            return Err(DemError::InvalidInput(format!("layer {layer} out of range")));
        }
        let tape = run(ckpt, &req.kl_prompt, &[])?;
        let original_logp = log_softmax(tape.logits.row(req.kl_prompt.len() - 1));
        Ok(Self {
            ckpt,
            req,
            layer,
            cfg,
            original_logp,
        })
    }

    fn shifts(&self, token: usize, dm: &[f64], da: &[f64]) -> Vec<Intervention> {
        vec![
            Intervention::add(ActivationSite::new(self.layer, SiteKind::Mlp, token), dm.to_vec()),
            Intervention::add(ActivationSite::new(self.layer, SiteKind::Attn, token), da.to_vec()),
        ]
    }

    pub fn evaluate(&self, dm: &[f64], da: &[f64]) -> Result<DeltaObjective> {
        let d = self.ckpt.config.d_model;
        let (mut gm, mut ga) = (vec![0.0; d], vec![0.0; d]);
        let mut nll = 0.0;
        let p = self.req.variants.len() as f64;
        for v in &self.req.variants {
            let mut tokens = v.tokens.clone();
            tokens.extend_from_slice(&self.req.target[..self.req.target.len() - 1]);
            let mut targets = vec![None; tokens.len()];
            for (i, &t) in self.req.target.iter().enumerate() {
                targets[v.tokens.len() - 1 + i] = Some(t);
            }
            let ivs = self.shifts(v.position, dm, da);
            let tape = run(self.ckpt, &tokens, &ivs)?;
            let (l, mut dl) = nll_and_dlogits(&tape.logits, &targets)?;
            nll += l / p;
            if self.cfg.beta > 0.0 {
                dl.scale(self.cfg.beta / p);
                let (_, g) = backward_pass(self.ckpt, &tape, &dl, &ivs, false)?;
                accumulate(&mut gm, &mut ga, &g, self.layer, v.position);
            }
        }

        let last = self.req.kl_prompt.len() - 1;
        let ivs = self.shifts(last, dm, da);
        let tape = run(self.ckpt, &self.req.kl_prompt, &ivs)?;
        let logp = log_softmax(tape.logits.row(last));
        let pe = softmax(tape.logits.row(last))?;
        let kl: f64 = pe
            .iter()
            .zip(logp.iter().zip(&self.original_logp))
            .map(|(p, (a, b))| p * (a - b))
            .sum();
        if self.cfg.alpha > 0.0 {
            let mut dl = Matrix::zeros(tape.seq_len(), self.ckpt.config.vocab_size);
            for (j, o) in dl.row_mut(last).iter_mut().enumerate() {
                *o = self.cfg.alpha * pe[j] * (logp[j] - self.original_logp[j] - kl);
            }
            let (_, g) = backward_pass(self.ckpt, &tape, &dl, &ivs, false)?;
            accumulate(&mut gm, &mut ga, &g, self.layer, last);
        }
        let loss = self.cfg.beta * nll + self.cfg.alpha * kl;
        if !loss.is_finite() {
            return Err(DemError::NonFinite(format!("shift objective {loss}")));
        }
        Ok(DeltaObjective {
            loss,
            nll,
            kl,
            grad_mlp: gm,
            grad_attn: ga,
        })
    }
}

fn accumulate(
    gm: &mut [f64],
    ga: &mut [f64],
    g: &crate::model::ActivationGrads,
    layer: usize,
    token: usize,
) {
    for (a, b) in gm.iter_mut().zip(g.mlp_out[layer].row(token)) {
        *a += b;
    }
    for (a, b) in ga.iter_mut().zip(g.attn_out[layer].row(token)) {
        *a += b;
    }
}

/// Optimized shifts and their targets at the host layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub layer: usize,
    pub delta_mlp: Vector,
    pub delta_attn: Vector,
    /// `v* = m + δ_mlp` at the key position of the prompt.
    pub v_mlp: Vector,
    pub v_attn: Vector,
    /// Objective after every accepted step, starting at `δ = 0`.
    pub losses: Vec<f64>,
    pub nlls: Vec<f64>,
}

fn clamp_norm(v: &mut [f64], max: f64) {
    let n = norm(v);
    if n > max {
        v.iter_mut().for_each(|x| *x *= max / n);
    }
}

/// Adam-scaled descent from `δ = 0`. A step that raises the objective is
/// rejected and the step size halved, so accepted losses never increase.
/// Shifts are clamped relative to the residual stream at the edit
/// position. Only the shifts of `kinds` are free; the others stay zero.
pub fn optimize_deltas(
    ckpt: &Checkpoint,
    req: &EditRequest,
    layer: usize,
    kinds: &[SiteKind],
    cfg: &DeltaOptimConfig,
) -> Result<DeltaResult> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    let problem = DeltaProblem::new(ckpt, req, layer, cfg)?;
    let d = ckpt.config.d_model;
    let main = &req.variants[0];
    let tape = run(ckpt, &main.tokens, &[])?;
    let s = main.position;
    let max_norm = cfg.clamp * norm(tape.block_out[layer].row(s));
    let free = [kinds.contains(&SiteKind::Mlp), kinds.contains(&SiteKind::Attn)];
    if !free[0] && !free[1] {
        return Err(DemError::InvalidInput("no sublayer to shift".into()));
    }

    let mut delta = [vec![0.0; d], vec![0.0; d]];
    let mut moments = [(vec![0.0; d], vec![0.0; d]), (vec![0.0; d], vec![0.0; d])];
    let mut cur = problem.evaluate(&delta[0], &delta[1])?;
    let mut losses = vec![cur.loss];
    let mut nlls = vec![cur.nll];
    let mut eta = cfg.step_size;
    let mut t = 0;
    for _ in 0..cfg.steps {
        let grads = [&cur.grad_mlp, &cur.grad_attn];
        let mut cand = delta.clone();
        let mut cand_moments = moments.clone();
        for j in 0..2 {
            if !free[j] {
                continue;
            }
            let (m, v) = &mut cand_moments[j];
            let c1 = 1.0 - BETA1.powi(t + 1);
            let c2 = 1.0 - BETA2.powi(t + 1);
            for i in 0..d {
                let g = grads[j][i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                cand[j][i] -= eta * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
            clamp_norm(&mut cand[j], max_norm);
        }
        let next = problem.evaluate(&cand[0], &cand[1])?;
        if next.loss <= cur.loss {
            delta = cand;
            moments = cand_moments;
            t += 1;
            cur = next;
            losses.push(cur.loss);
            nlls.push(cur.nll);
        } else {
            eta *= 0.5;
        }
    }
    let [dm, da] = delta;
    let v_mlp = crate::numerics::add(tape.mlp_out[layer].row(s), &dm);
    let v_attn = crate::numerics::add(tape.attn_out[layer].row(s), &da);
    Ok(DeltaResult {
        layer,
        delta_mlp: dm,
        delta_attn: da,
        v_mlp,
        v_attn,
        losses,
        nlls,
    })
}

/// Which layers and sublayers an edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    /// Cosine-selected layers, MLP and attention.
    Dem,
    /// Caller-supplied layers, MLP and attention.
    FixedLayer,
    /// Cosine-selected layers, MLP only.
    MlpOnly,
    /// Cosine-selected layers, attention only.
    AttnOnly,
}

impl EditMode {
    pub const ALL: [EditMode; 4] = [
        EditMode::Dem,
        EditMode::FixedLayer,
        EditMode::MlpOnly,
        EditMode::AttnOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Dem => "dem",
            EditMode::FixedLayer => "fixed-layer",
            EditMode::MlpOnly => "mlp-only",
            EditMode::AttnOnly => "attn-only",
        }
    }

    pub fn kinds(self) -> Vec<SiteKind> {
        match self {
            EditMode::MlpOnly => vec![SiteKind::Mlp],
            EditMode::AttnOnly => vec![SiteKind::Attn],
            _ => vec![SiteKind::Mlp, SiteKind::Attn],
        }
    }
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditMode {
    type Err = DemError;

    fn from_str(s: &str) -> Result<Self> {
        EditMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                DemError::Config(format!(
                    "unknown mode `{s}` (expected dem, fixed-layer, mlp-only or attn-only)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub mode: EditMode,
    /// Layers selected in the cosine-ranked modes.
    pub k: usize,
    /// Layer list for `fixed-layer` mode.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    pub mu: f64,
    #[serde(default)]
    pub key_position: KeyPosition,
    pub delta: DeltaOptimConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            mode: EditMode::Dem,
            k: 3,
            layers: None,
            mu: 1.0,
            key_position: KeyPosition::default(),
            delta: DeltaOptimConfig::default(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.delta.validate()?;
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(DemError::Config(format!("mu must be ≥ 0, got {}", self.mu)));
        }
        match (self.mode, &self.layers) {
            (EditMode::FixedLayer, None) => {
                return Err(DemError::Config("fixed-layer mode needs a layer list".into()))
            }
            (EditMode::FixedLayer, Some(ls)) => {
                if ls.is_empty() {
                    return Err(DemError::Config("empty layer list".into()));
                }
                let mut sorted = ls.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != ls.len() {
                    return Err(DemError::Config(format!("duplicate layers in {ls:?}")));
                }
                if let Some(l) = ls.iter().find(|&&l| l >= n_layers) {
                    return Err(DemError::Config(format!("layer {l} outside 0..{n_layers}")));
                }
            }
            _ => {
                if self.k == 0 || self.k > n_layers {
                    return Err(DemError::Config(format!(
                        "k = {} outside 1..={n_layers}",
                        self.k
                    )));
                }
            }
        }
        Ok(())
    }
}

fn weight_name(layer: usize, kind: SiteKind) -> String {
    match kind {
        SiteKind::Attn => format!("layers.{layer}.attn.w_o"),
        _ => format!("layers.{layer}.mlp.w_o"),
    }
}

fn tensor_hash(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One updated output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteEdit {
    pub layer: usize,
    pub kind: SiteKind,
    /// Added to the stored weight (`key × out`, the stored orientation).
    pub delta: Matrix,
    /// `K1`, one key column per prompt variant.
    pub keys: Matrix,
    /// `V1 = W0·K1 + R`.
    pub values: Matrix,
    /// `R`, the residual assigned to this site.
    pub residual: Matrix,
    pub pre_norm: f64,
    pub post_norm: f64,
    /// Weight before the edit, restored on revert.
    pub snapshot: Matrix,
    /// Hash of the weight right after the edit.
    pub post_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SiteHeader {
    layer: usize,
    kind: SiteKind,
    pre_norm: f64,
    post_norm: f64,
    post_hash: String,
}

/// Everything needed to audit and undo one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditReceipt {
    pub case_id: u64,
    pub selection: LayerSelection,
    pub config: EditConfig,
    pub deltas: DeltaResult,
    pub sites: Vec<SiteEdit>,
}

impl EditReceipt {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let sites: Vec<SiteHeader> = self
            .sites
            .iter()
            .map(|s| SiteHeader {
                layer: s.layer,
                kind: s.kind,
                pre_norm: s.pre_norm,
                post_norm: s.post_norm,
                post_hash: s.post_hash.clone(),
            })
            .collect();
        let header = json!({
            "kind": "edit_receipt",
            "case_id": self.case_id,
            "selection": self.selection,
            "config": self.config,
            "deltas": self.deltas,
            "sites": sites,
        });
        let mut tensors = Vec::new();
        for (i, s) in self.sites.iter().enumerate() {
            tensors.extend([
                (format!("sites.{i}.delta"), &s.delta),
                (format!("sites.{i}.keys"), &s.keys),
                (format!("sites.{i}.values"), &s.values),
                (format!("sites.{i}.residual"), &s.residual),
                (format!("sites.{i}.snapshot"), &s.snapshot),
            ]);
        }
        write_container(w, RECEIPT_MAGIC, header, &tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = parse_container(bytes, RECEIPT_MAGIC)?;
        let field = |name: &str| {
            c.header
                .get(name)
                .cloned()
                .ok_or_else(|| DemError::Format(format!("receipt header has no `{name}`")))
        };
        let bad = |e: serde_json::Error| DemError::Format(format!("bad receipt header: {e}"));
        let case_id: u64 = serde_json::from_value(field("case_id")?).map_err(bad)?;
        let selection: LayerSelection = serde_json::from_value(field("selection")?).map_err(bad)?;
        let config: EditConfig = serde_json::from_value(field("config")?).map_err(bad)?;
        let deltas: DeltaResult = serde_json::from_value(field("deltas")?).map_err(bad)?;
        let headers: Vec<SiteHeader> = serde_json::from_value(field("sites")?).map_err(bad)?;
        if c.tensors.len() != 5 * headers.len() {
            return Err(DemError::Format(format!(
                "{} sites need {} tensors, found {}",
                headers.len(),
                5 * headers.len(),
                c.tensors.len()
            )));
        }
        let mut tensors = c.tensors.into_iter();
        let mut sites = Vec::with_capacity(headers.len());
        for (i, h) in headers.into_iter().enumerate() {
            let mut next = |part: &str| {
                let (name, m) = tensors.next().expect("count checked");
                if name != format!("sites.{i}.{part}") {
                    return Err(DemError::Format(format!(
                        "expected tensor sites.{i}.{part}, found {name}"
                    )));
                }
                Ok(m)
            };
            sites.push(SiteEdit {
                layer: h.layer,
                kind: h.kind,
                delta: next("delta")?,
                keys: next("keys")?,
                values: next("values")?,
                residual: next("residual")?,
                snapshot: next("snapshot")?,
                pre_norm: h.pre_norm,
                post_norm: h.post_norm,
                post_hash: h.post_hash,
            });
        }
        Ok(Self {
            case_id,
            selection,
            config,
            deltas,
            sites,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Number of leading layers an edit may touch. With subject keys the final
/// layer is excluded: a shift written there never reaches later positions.
pub fn editable_layers(n_layers: usize, key_position: KeyPosition) -> usize {
    match key_position {
        KeyPosition::SubjectLast => n_layers.saturating_sub(1).max(1),
        KeyPosition::LastToken => n_layers,
    }
}

/// Applies one edit to a copy of `ckpt`.
///
/// Cosine-ranked modes choose `k` layers among [`editable_layers`].
/// Layers are visited in ascending order. At each, the residual still
/// missing at the host layer is split evenly over the layers left to edit,
/// shared between the MLP and attention in proportion to their optimized
/// shifts, and written into the output projections by
/// [`compute_delta_weights`].
pub fn apply_edit(
    ckpt: &Checkpoint,
    req: &EditRequest,
    cfg: &EditConfig,
    cov: &mut CovarianceCache,
) -> Result<(Checkpoint, EditReceipt)> {
    cfg.validate(ckpt.config.n_layers)?;
    if cfg.key_position != req.key_position {
        return Err(DemError::Config(format!(
            "request keyed at {} but config expects {}",
            req.key_position, cfg.key_position
        )));
    }
    let kinds = cfg.mode.kinds();
    let mut selection = match (cfg.mode, &cfg.layers) {
        (EditMode::FixedLayer, Some(layers)) => {
            let all = select_layers(ckpt, req.prompt(), ckpt.config.n_layers)?;
            let mut entries: Vec<(usize, f64)> =
                all.entries.into_iter().filter(|e| layers.contains(&e.0)).collect();
            entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            LayerSelection {
                entries,
                kinds: vec![],
            }
        }
        _ => {
            let n = editable_layers(ckpt.config.n_layers, cfg.key_position);
            select_among(ckpt, req.prompt(), cfg.k.min(n), n)?
        }
    };
    selection.kinds = kinds.clone();
    let layers = selection.layers();
    let host = selection.deepest().ok_or_else(|| DemError::InvalidInput("empty selection".into()))?;

    let deltas = optimize_deltas(ckpt, req, host, &kinds, &cfg.delta)?;
    let shift = crate::numerics::add(&deltas.delta_mlp, &deltas.delta_attn);
    let (nm, na) = (norm(&deltas.delta_mlp), norm(&deltas.delta_attn));
    let share = |kind: SiteKind| {
        if nm + na == 0.0 {
            0.0
        } else if kind == SiteKind::Mlp {
            nm / (nm + na)
        } else {
            na / (nm + na)
        }
    };

    // host-layer targets per variant
    let mut goals = Vec::with_capacity(req.variants.len());
    for v in &req.variants {
        let tape = run(ckpt, &v.tokens, &[])?;
        goals.push(crate::numerics::add(tape.block_out[host].row(v.position), &shift));
    }

    let mut edited = ckpt.clone();
    let mut sites = Vec::new();
    let u = req.variants.len();
    for (i, &layer) in layers.iter().enumerate() {
        let remaining = (layers.len() - i) as f64;
        let tapes = req
            .variants
            .iter()
            .map(|v| run(&edited, &v.tokens, &[]))
            .collect::<Result<Vec<_>>>()?;
        let resid: Vec<Vector> = tapes
            .iter()
            .zip(&req.variants)
            .zip(&goals)
            .map(|((t, v), g)| {
                let cur = t.block_out[host].row(v.position);
                g.iter().zip(cur).map(|(a, b)| (a - b) / remaining).collect()
            })
            .collect();
        for &kind in &kinds {
            let keys: Vec<Vector> = tapes
                .iter()
                .zip(&req.variants)
                .map(|(t, v)| t.key(layer, kind, v.position).expect("sublayer kind").to_vec())
                .collect();
            let k1 = Matrix::from_columns(&keys)?;
            let w = share(kind);
            let r_cols: Vec<Vector> = resid.iter().map(|r| r.iter().map(|x| w * x).collect()).collect();
            let r = Matrix::from_columns(&r_cols)?;
            let c0 = cov.get(ckpt, layer, kind)?;
            let delta = compute_delta_weights(&r, &k1, c0)?.transpose();

            let name = weight_name(layer, kind);
            let weight = edited.tensor_mut(&name).expect("output projection exists");
            let snapshot = weight.clone();
            // V1 = W0ᵀ-applied keys plus residual, column per variant
            let mut values = weight.t_matmul(&k1)?;
            values.add_assign(&r)?;
            weight.add_assign(&delta)?;
            if !weight.is_finite() {
                return Err(DemError::NonFinite(format!("{name} after edit")));
            }
            sites.push(SiteEdit {
                layer,
                kind,
                pre_norm: snapshot.frobenius_norm(),
                post_norm: weight.frobenius_norm(),
                post_hash: tensor_hash(weight),
                delta,
                keys: k1,
                values,
                residual: r,
                snapshot,
            });
        }
        debug_assert_eq!(resid.len(), u);
    }
    Ok((
        edited,
        EditReceipt {
            case_id: req.case_id,
            selection,
            config: cfg.clone(),
            deltas,
            sites,
        },
    ))
}

/// Restores the weights a receipt changed. Fails with a lineage error when
/// a weight no longer holds the post-edit value (e.g. reverting twice).
pub fn revert_edit(ckpt: &Checkpoint, receipt: &EditReceipt) -> Result<Checkpoint> {
    let mut out = ckpt.clone();
    for s in receipt.sites.iter().rev() {
        let name = weight_name(s.layer, s.kind);
        let w = out
            .tensor_mut(&name)
            .ok_or_else(|| DemError::Dimension(format!("checkpoint has no {name}")))?;
        if w.shape() != s.snapshot.shape() || w.shape() != s.delta.shape() {
            return Err(DemError::Dimension(format!(
                "{name} is {:?}, receipt holds {:?}",
                w.shape(),
                s.snapshot.shape()
            )));
        }
        if tensor_hash(w) != s.post_hash {
            return Err(DemError::Lineage(format!(
                "{name} does not hold the weights this receipt produced (case {})",
                receipt.case_id
            )));
        }
        *w = s.snapshot.clone();
    }
    Ok(out)
}
