// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing with free-text targets, entity decoupling and the
//! per-layer recall probe.
//!
//! A trace compares three kinds of run over the same prompt: the clean run,
//! a corrupted run with Gaussian noise on the subject embeddings, and
//! restoration runs that are corrupted but force one clean hidden state
//! back in. Every run greedy-decodes as many tokens as the target has and
//! scores the decode with [`target_similarity`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CKRecord, EncodedCase};
use crate::error::{DemError, Result};
use crate::model::{
    generate_greedy, run, split_words, unembed, ActivationSite, ActivationTape, Checkpoint,
    Intervention, SiteKind, TokenId, Vocabulary,
};
use crate::numerics::{cosine_similarity, simpson_overlap, top_k_indices, Matrix};

/// Size of the candidate sets compared by the recall probe.
pub const RECALL_CANDIDATES: usize = 50;

/// Words that [`decouple`] replaces with other entities.
pub const SUBSTITUTABLE: [&str; 2] = ["PersonX", "PersonY"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Noise std as a multiple of the std of the token embedding entries.
    pub sigma_mult: f64,
    pub noise_seed: u64,
    /// Tokens restored around each site (centered, clipped to the prompt).
    pub window: usize,
    pub top_k: usize,
    pub kinds: Vec<SiteKind>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            sigma_mult: 3.0,
            noise_seed: 0,
            window: 1,
            top_k: 3,
            kinds: vec![SiteKind::Block, SiteKind::Mlp, SiteKind::Attn],
        }
    }
}

impl TraceConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(DemError::Config(m));
        if !(self.sigma_mult >= 0.0 && self.sigma_mult.is_finite()) {
            return bad(format!("sigma multiplier must be ≥ 0, got {}", self.sigma_mult));
        }
        if self.window == 0 {
            return bad("restoration window must be ≥ 1".into());
        }
        if self.top_k == 0 || self.top_k > n_layers {
            return bad(format!("top_k = {} outside 1..={n_layers}", self.top_k));
        }
        if self.kinds.is_empty() {
            return bad("no site kinds to trace".into());
        }
        let mut seen = BTreeSet::new();
        for &k in &self.kinds {
            if k == SiteKind::Embedding {
                return bad("embedding sites are not traced".into());
            }
            if !seen.insert(k) {
                return bad(format!("site kind {k} listed twice"));
            }
        }
        Ok(())
    }
}

/// Token-level F1 between bags of tokens.
pub fn target_similarity(generated: &[TokenId], target: &[TokenId]) -> Result<f64> {
    if target.is_empty() {
        return Err(DemError::InvalidInput("empty target".into()));
    }
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &t in target {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in generated {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let precision = common as f64 / generated.len() as f64;
    let recall = common as f64 / target.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// A prompt ready for tracing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceInput {
    pub case_id: u64,
    pub prompt: Vec<TokenId>,
    /// `[start, end)` of the subject in `prompt`.
    pub subject: (usize, usize),
    pub target: Vec<TokenId>,
}

impl TraceInput {
    pub fn new(
        case_id: u64,
        prompt: Vec<TokenId>,
        subject: (usize, usize),
        target: Vec<TokenId>,
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(DemError::InvalidInput("empty prompt".into()));
        }
        if subject.1 <= subject.0 {
            return Err(DemError::InvalidInput("empty subject span".into()));
        }
        if subject.1 > prompt.len() {
            return Err(DemError::InvalidInput(format!(
                "subject span end {} beyond prompt of length {}",
                subject.1,
                prompt.len()
            )));
        }
        if target.is_empty() {
            return Err(DemError::InvalidInput("empty target".into()));
        }
        Ok(Self {
            case_id,
            prompt,
            subject,
            target,
        })
    }

    /// Scores against `target_true` when the record has one.
    pub fn from_record(record: &CKRecord, vocab: &Vocabulary) -> Result<Self> {
        let case = EncodedCase::encode(record, vocab)?;
        let target = case.trace_target().to_vec();
        Self::new(case.case_id, case.prompt, case.subject, target)
    }

    fn check_fits(&self, ckpt: &Checkpoint) -> Result<()> {
        let need = self.prompt.len() + self.target.len();
        if need > ckpt.config.max_seq {
            return Err(DemError::InvalidInput(format!(
                "case {}: prompt plus target is {need} tokens, max_seq is {}",
                self.case_id, ckpt.config.max_seq
            )));
        }
        Ok(())
    }
}

/// Population std of the token embedding entries.
pub fn embedding_std(ckpt: &Checkpoint) -> f64 {
    let v = ckpt.tok_emb.as_slice();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn token_seed(seed: u64, token: usize) -> u64 {
    // splitmix64 finalizer so neighbouring tokens get unrelated streams
    let mut z = seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noise on the embedding of every subject token. Empty at `σ = 0`.
pub fn corruption(ckpt: &Checkpoint, input: &TraceInput, cfg: &TraceConfig) -> Vec<Intervention> {
    let sigma = cfg.sigma_mult * embedding_std(ckpt);
    if sigma == 0.0 {
        return Vec::new();
    }
    (input.subject.0..input.subject.1)
        .map(|t| {
            Intervention::noise(
                ActivationSite::new(0, SiteKind::Embedding, t),
                sigma,
                token_seed(cfg.noise_seed, t),
            )
        })
        .collect()
}

fn decode_score(ckpt: &Checkpoint, input: &TraceInput, ivs: &[Intervention]) -> Result<(Vec<TokenId>, f64)> {
    let out = generate_greedy(ckpt, &input.prompt, input.target.len(), None, ivs)?;
    let score = target_similarity(&out, &input.target)?;
    Ok((out, score))
}

/// Clean decode and the prompt tape that restorations copy from.
#[derive(Debug, Clone)]
pub struct CleanRun {
    pub score: f64,
    pub decoded: Vec<TokenId>,
    pub tape: ActivationTape,
}

pub fn clean_run(ckpt: &Checkpoint, input: &TraceInput) -> Result<CleanRun> {
    input.check_fits(ckpt)?;
    let (decoded, score) = decode_score(ckpt, input, &[])?;
    let tape = run(ckpt, &input.prompt, &[])?;
    Ok(CleanRun {
        score,
        decoded,
        tape,
    })
}

pub fn corrupted_run(ckpt: &Checkpoint, input: &TraceInput, cfg: &TraceConfig) -> Result<f64> {
    cfg.validate(ckpt.config.n_layers)?;
    input.check_fits(ckpt)?;
    Ok(decode_score(ckpt, input, &corruption(ckpt, input, cfg))?.1)
}

fn restoration(
    input: &TraceInput,
    clean: &CleanRun,
    cfg: &TraceConfig,
    sites: &[ActivationSite],
) -> Result<Vec<Intervention>> {
    if clean.tape.cache.tokens != input.prompt {
        return Err(DemError::InvalidInput(format!(
            "case {}: clean tape was recorded for a different prompt",
            input.case_id
        )));
    }
    let n = input.prompt.len();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for &site in sites {
        if site.kind == SiteKind::Embedding {
            return Err(DemError::Intervention("embedding sites cannot be restored".into()));
        }
        if site.token >= n || site.layer >= clean.tape.block_out.len() {
            return Err(DemError::Intervention(format!(
                "site (token {}, layer {}) outside the {n}-token prompt",
                site.token, site.layer
            )));
        }
        let start = site.token.saturating_sub((cfg.window - 1) / 2);
        let end = (start + cfg.window).min(n);
        for token in start..end {
            let s = ActivationSite { token, ..site };
            if seen.insert(s) {
                out.push(Intervention::replace(s, clean.tape.site(s).to_vec()));
            }
        }
    }
    Ok(out)
}

/// Corrupted decode with the clean value forced back in at `sites`.
pub fn restore_run(
    ckpt: &Checkpoint,
    input: &TraceInput,
    clean: &CleanRun,
    cfg: &TraceConfig,
    sites: &[ActivationSite],
) -> Result<f64> {
    cfg.validate(ckpt.config.n_layers)?;
    input.check_fits(ckpt)?;
    let mut ivs = corruption(ckpt, input, cfg);
    ivs.extend(restoration(input, clean, cfg, sites)?);
    Ok(decode_score(ckpt, input, &ivs)?.1)
}

/// Prompt logits of a restoration run, for comparing against the clean run.
pub fn restored_logits(
    ckpt: &Checkpoint,
    input: &TraceInput,
    clean: &CleanRun,
    cfg: &TraceConfig,
    sites: &[ActivationSite],
) -> Result<Matrix> {
    cfg.validate(ckpt.config.n_layers)?;
    let mut ivs = corruption(ckpt, input, cfg);
    ivs.extend(restoration(input, clean, cfg, sites)?);
    Ok(run(ckpt, &input.prompt, &ivs)?.logits)
}

/// Restoration scores for every traced `(kind, token, layer)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub case_id: u64,
    pub kinds: Vec<SiteKind>,
    pub tokens: Vec<TokenId>,
    pub subject: (usize, usize),
    /// `scores[kind][token][layer]`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub p_clean: f64,
    pub p_corr: f64,
}

impl TraceGrid {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.scores
            .first()
            .and_then(|k| k.first())
            .map_or(0, Vec::len)
    }

    pub fn kind_scores(&self, kind: SiteKind) -> Result<&[Vec<f64>]> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.scores[i].as_slice())
            .ok_or_else(|| DemError::InvalidInput(format!("{kind} was not traced")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per site: `case_id,kind,token,layer,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,kind,token,layer,score\n");
        for (kind, rows) in self.kinds.iter().zip(&self.scores) {
            for (t, row) in rows.iter().enumerate() {
                for (l, p) in row.iter().enumerate() {
                    let _ = writeln!(out, "{},{kind},{t},{l},{p}", self.case_id);
                }
            }
        }
        out
    }
}

pub fn trace_grid(ckpt: &Checkpoint, input: &TraceInput, cfg: &TraceConfig) -> Result<TraceGrid> {
    cfg.validate(ckpt.config.n_layers)?;
    let clean = clean_run(ckpt, input)?;
    let p_corr = corrupted_run(ckpt, input, cfg)?;
    let n_layers = ckpt.config.n_layers;
    let mut scores = Vec::with_capacity(cfg.kinds.len());
    for &kind in &cfg.kinds {
        let mut rows = Vec::with_capacity(input.prompt.len());
        for token in 0..input.prompt.len() {
            let row = (0..n_layers)
                .map(|layer| {
                    restore_run(ckpt, input, &clean, cfg, &[ActivationSite::new(layer, kind, token)])
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        scores.push(rows);
    }
    Ok(TraceGrid {
        case_id: input.case_id,
        kinds: cfg.kinds.clone(),
        tokens: input.prompt.clone(),
        subject: input.subject,
        scores,
        p_clean: clean.score,
        p_corr,
    })
}

/// The `k` layers whose best token scores highest for `kind`, ties to the
/// lower layer, returned ascending.
pub fn top_k_layers(grid: &TraceGrid, kind: SiteKind, k: usize) -> Result<Vec<usize>> {
    let rows = grid.kind_scores(kind)?;
    let n_layers = grid.n_layers();
    if k == 0 || k > n_layers {
        return Err(DemError::InvalidInput(format!("k = {k} outside 1..={n_layers}")));
    }
    let maxima: Vec<f64> = (0..n_layers)
        .map(|l| rows.iter().map(|r| r[l]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..n_layers).collect();
    order.sort_by(|&a, &b| maxima[b].total_cmp(&maxima[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Per kind, the layers that are in the top-k of every input's grid.
pub fn decouple_inputs(
    ckpt: &Checkpoint,
    inputs: &[TraceInput],
    cfg: &TraceConfig,
) -> Result<BTreeMap<SiteKind, Vec<usize>>> {
    if inputs.len() < 2 {
        return Err(DemError::InvalidInput(format!(
            "decoupling needs at least 2 substitutions, got {}",
            inputs.len()
        )));
    }
    let mut out: BTreeMap<SiteKind, BTreeSet<usize>> = BTreeMap::new();
    for (i, input) in inputs.iter().enumerate() {
        let grid = trace_grid(ckpt, input, cfg)?;
        for &kind in &cfg.kinds {
            let top: BTreeSet<usize> = top_k_layers(&grid, kind, cfg.top_k)?.into_iter().collect();
            match out.get_mut(&kind) {
                Some(acc) if i > 0 => acc.retain(|l| top.contains(l)),
                _ => {
                    out.insert(kind, top);
                }
            }
        }
    }
    Ok(out.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
}

/// Traces the record once per name, with the first substitutable entity
/// replaced by that name, and intersects the located layers.
pub fn decouple(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    record: &CKRecord,
    names: &[&str],
    cfg: &TraceConfig,
) -> Result<BTreeMap<SiteKind, Vec<usize>>> {
    let words = split_words(&record.prompt);
    let entity = SUBSTITUTABLE
        .iter()
        .find(|e| words.iter().any(|w| w == *e))
        .ok_or_else(|| {
            DemError::InvalidInput(format!(
                "case {}: prompt has no substitutable entity ({})",
                record.case_id,
                SUBSTITUTABLE.join(", ")
            ))
        })?;
    if names.len() < 2 {
        return Err(DemError::InvalidInput(format!(
            "decoupling needs at least 2 substitutions, got {}",
            names.len()
        )));
    }
    let inputs = names
        .iter()
        .map(|name| TraceInput::from_record(&record.substitute(entity, name)?, vocab))
        .collect::<Result<Vec<_>>>()?;
    decouple_inputs(ckpt, &inputs, cfg)
}

/// Probe values for one sublayer at the last prompt token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub layer: usize,
    pub kind: SiteKind,
    pub cosine: f64,
    pub simpson: f64,
    pub candidates_in: Vec<u32>,
    pub candidates_out: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallProfile {
    pub tokens: Vec<TokenId>,
    /// Layer-major, MLP before attention.
    pub entries: Vec<RecallEntry>,
}

impl RecallProfile {
    pub fn get(&self, layer: usize, kind: SiteKind) -> Option<&RecallEntry> {
        self.entries.iter().find(|e| e.layer == layer && e.kind == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,cosine,simpson\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.layer, e.kind, e.cosine, e.simpson);
        }
        out
    }
}

/// Compares each sublayer's input `h_in` with `h_in` plus its output at
/// the last token: their cosine, and the Simpson overlap of the top
/// [`RECALL_CANDIDATES`] tokens each would predict.
pub fn recall_profile(ckpt: &Checkpoint, prompt: &[TokenId]) -> Result<RecallProfile> {
    if prompt.is_empty() {
        return Err(DemError::InvalidInput("empty prompt".into()));
    }
    let tape = run(ckpt, prompt, &[])?;
    let last = prompt.len() - 1;
    let k = RECALL_CANDIDATES.min(ckpt.config.vocab_size);
    let mut entries = Vec::with_capacity(2 * ckpt.config.n_layers);
    for layer in 0..ckpt.config.n_layers {
        let h_in = tape.block_in[layer].row(last);
        let candidates_in = top_k_indices(&unembed(ckpt, h_in)?, k);
        for (kind, sub) in [
            (SiteKind::Mlp, &tape.mlp_out[layer]),
            (SiteKind::Attn, &tape.attn_out[layer]),
        ] {
            let delta = sub.row(last);
            let h_out: Vec<f64> = h_in.iter().zip(delta).map(|(a, b)| a + b).collect();
            let unchanged = delta.iter().all(|&x| x == 0.0);
            let cosine = if unchanged { 1.0 } else { cosine_similarity(h_in, &h_out)? };
            let candidates_out = top_k_indices(&unembed(ckpt, &h_out)?, k);
            let simpson = simpson_overlap(&candidates_in, &candidates_out)?;
            entries.push(RecallEntry {
                layer,
                kind,
                cosine,
                simpson,
                candidates_in: candidates_in.clone(),
                candidates_out,
            });
        }
    }
    Ok(RecallProfile {
        tokens: prompt.to_vec(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    fn random_model() -> Checkpoint {
        let mut c = init_model(&ModelConfig::new(20, 8, 3, 2, 16, 11)).unwrap();
        for (_, t) in c.tensors_mut() {
            t.scale(5.0);
        }
        c
    }

    fn input() -> TraceInput {
        TraceInput::new(7, vec![2, 5, 6, 9, 3], (1, 3), vec![4, 8, 8]).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(target_similarity(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(target_similarity(&[4, 5], &[1, 2, 3]).unwrap(), 0.0);
        // "live happily" against "live happily ever after"
        let f = target_similarity(&[10, 11], &[10, 11, 12, 13]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(target_similarity(&[], &[1]).unwrap(), 0.0);
        // bag semantics: one repeated token matches one occurrence
        assert_eq!(target_similarity(&[1, 1], &[1, 2]).unwrap(), 0.5);
        assert!(target_similarity(&[1], &[]).is_err());
    }

    proptest! {
        #[test]
        fn similarity_is_bounded_and_symmetric(
            a in prop::collection::vec(0u32..6, 1..8),
            b in prop::collection::vec(0u32..6, 1..8),
        ) {
            let ab = target_similarity(&a, &b).unwrap();
            let ba = target_similarity(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn top_k_sets_are_nested(
            maxima in prop::collection::vec(0.0f64..1.0, 1..7),
            k in 1usize..6,
        ) {
            let l = maxima.len();
            prop_assume!(k < l);
            let grid = grid_with_maxima(&maxima);
            let small = top_k_layers(&grid, SiteKind::Block, k).unwrap();
            let big = top_k_layers(&grid, SiteKind::Block, k + 1).unwrap();
            prop_assert!(small.iter().all(|x| big.contains(x)));
        }
    }

    fn grid_with_maxima(maxima: &[f64]) -> TraceGrid {
        // two tokens; the second never beats the first
        let rows = vec![maxima.to_vec(), maxima.iter().map(|m| m / 2.0).collect()];
        TraceGrid {
            case_id: 0,
            kinds: vec![SiteKind::Block],
            tokens: vec![1, 2],
            subject: (0, 1),
            scores: vec![rows],
            p_clean: 1.0,
            p_corr: 0.0,
        }
    }

    #[test]
    fn top_k_examples() {
        let g = grid_with_maxima(&[0.1, 0.9, 0.9, 0.2]);
        assert_eq!(top_k_layers(&g, SiteKind::Block, 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_layers(&g, SiteKind::Block, 4).unwrap(), vec![0, 1, 2, 3]);
        let flat = grid_with_maxima(&[0.5; 4]);
        assert_eq!(top_k_layers(&flat, SiteKind::Block, 1).unwrap(), vec![0]);
        assert!(top_k_layers(&g, SiteKind::Block, 0).is_err());
        assert!(top_k_layers(&g, SiteKind::Block, 5).is_err());
        assert!(top_k_layers(&g, SiteKind::Mlp, 1).is_err());
    }

    #[test]
    fn config_validation() {
        TraceConfig::default().validate(3).unwrap();
        let bad = [
            TraceConfig { sigma_mult: -1.0, ..Default::default() },
            TraceConfig { window: 0, ..Default::default() },
            TraceConfig { top_k: 4, ..Default::default() },
            TraceConfig { kinds: vec![], ..Default::default() },
            TraceConfig { kinds: vec![SiteKind::Mlp, SiteKind::Mlp], ..Default::default() },
            TraceConfig { kinds: vec![SiteKind::Embedding], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(3), Err(DemError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn input_validation() {
        assert!(TraceInput::new(0, vec![1, 2], (1, 1), vec![3]).is_err());
        assert!(TraceInput::new(0, vec![1, 2], (1, 3), vec![3]).is_err());
        assert!(TraceInput::new(0, vec![1, 2], (0, 1), vec![]).is_err());
        let long = TraceInput::new(0, vec![1; 14], (0, 1), vec![3; 3]).unwrap();
        assert!(clean_run(&random_model(), &long).is_err());
    }

    #[test]
    fn clean_run_is_deterministic() {
        let c = random_model();
        let a = clean_run(&c, &input()).unwrap();
        let b = clean_run(&c, &input()).unwrap();
        assert_eq!(a.score, b.score);
        assert_eq!(a.decoded, b.decoded);
        assert_eq!(a.tape.logits, b.tape.logits);
        assert!((0.0..=1.0).contains(&a.score));
    }

    #[test]
    fn noise_is_seeded() {
        let c = random_model();
        let cfg = TraceConfig::default();
        let ivs = corruption(&c, &input(), &cfg);
        assert_eq!(ivs.len(), 2);
        assert_eq!(ivs, corruption(&c, &input(), &cfg));
        assert_ne!(ivs[0].action, ivs[1].action);
        let other = corruption(&c, &input(), &TraceConfig { noise_seed: 1, ..cfg.clone() });
        assert_ne!(ivs, other);
        assert_eq!(
            corrupted_run(&c, &input(), &cfg).unwrap(),
            corrupted_run(&c, &input(), &cfg).unwrap()
        );
    }

    #[test]
    fn zero_noise_collapses_the_grid() {
        let c = random_model();
        let cfg = TraceConfig { sigma_mult: 0.0, ..Default::default() };
        let grid = trace_grid(&c, &input(), &cfg).unwrap();
        assert_eq!(grid.p_corr, grid.p_clean);
        for kind in &grid.scores {
            for row in kind {
                assert!(row.iter().all(|&p| p == grid.p_clean));
            }
        }
    }

    #[test]
    fn full_restoration_reproduces_the_clean_run() {
        let c = random_model();
        let inp = input();
        let cfg = TraceConfig::default();
        let clean = clean_run(&c, &inp).unwrap();
        let all: Vec<ActivationSite> = (0..inp.prompt.len())
            .flat_map(|t| (0..3).map(move |l| ActivationSite::new(l, SiteKind::Block, t)))
            .collect();
        let logits = restored_logits(&c, &inp, &clean, &cfg, &all).unwrap();
        assert!(logits.max_abs_diff(&clean.tape.logits).unwrap() < 1e-9);
        assert_eq!(restore_run(&c, &inp, &clean, &cfg, &all).unwrap(), clean.score);
        assert_eq!(
            restore_run(&c, &inp, &clean, &cfg, &[]).unwrap(),
            corrupted_run(&c, &inp, &cfg).unwrap()
        );
    }

    #[test]
    fn restoration_rejects_bad_sites_and_foreign_tapes() {
        let c = random_model();
        let inp = input();
        let cfg = TraceConfig::default();
        let clean = clean_run(&c, &inp).unwrap();
        let far = ActivationSite::new(0, SiteKind::Block, 9);
        assert!(restore_run(&c, &inp, &clean, &cfg, &[far]).is_err());
        let emb = ActivationSite::new(0, SiteKind::Embedding, 0);
        assert!(restore_run(&c, &inp, &clean, &cfg, &[emb]).is_err());
        let other = TraceInput::new(0, vec![1, 1, 1], (0, 1), vec![2]).unwrap();
        assert!(restore_run(&c, &other, &clean, &cfg, &[]).is_err());
    }

    #[test]
    fn window_restores_neighbours() {
        let c = random_model();
        let inp = input();
        let clean = clean_run(&c, &inp).unwrap();
        let cfg = TraceConfig { window: 3, ..Default::default() };
        let ivs = restoration(&inp, &clean, &cfg, &[ActivationSite::new(1, SiteKind::Mlp, 0)]).unwrap();
        let tokens: Vec<usize> = ivs.iter().map(|i| i.site.token).collect();
        assert_eq!(tokens, vec![0, 1, 2]);
        let ivs = restoration(&inp, &clean, &cfg, &[ActivationSite::new(1, SiteKind::Mlp, 2)]).unwrap();
        assert_eq!(ivs.iter().map(|i| i.site.token).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn grid_shape_and_range() {
        let c = random_model();
        let grid = trace_grid(&c, &input(), &TraceConfig::default()).unwrap();
        assert_eq!(grid.scores.len(), 3);
        assert!(grid.scores.iter().all(|k| k.len() == 5 && k.iter().all(|r| r.len() == 3)));
        assert!(grid.scores.iter().flatten().flatten().all(|p| (0.0..=1.0).contains(p)));
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 5 * 3);
        let back: TraceGrid = serde_json::from_str(&grid.to_json().unwrap()).unwrap();
        assert_eq!(back, grid);
    }

    /// Two layers, no attention, only layer 1's MLP writes anything, and it
    /// writes loudly. With the subject as the last token, the answer
    /// depends on the subject through that MLP alone.
    fn storing_model() -> Checkpoint {
        let mut c = init_model(&ModelConfig::new(16, 8, 2, 2, 8, 3)).unwrap();
        for l in &mut c.layers {
            l.w_o_attn.scale(0.0);
        }
        c.layers[0].w_o_mlp.scale(0.0);
        c.layers[1].w_o_mlp.scale(200.0);
        c
    }

    /// Inputs `[1, s]` whose clean answer the corruption destroys.
    fn stored_inputs(c: &Checkpoint, cfg: &TraceConfig, n: usize) -> Vec<TraceInput> {
        let mut out = Vec::new();
        for s in 2..16 {
            let probe = TraceInput::new(s as u64, vec![1, s], (1, 2), vec![0]).unwrap();
            let answer = clean_run(c, &probe).unwrap().decoded;
            let inp = TraceInput::new(s as u64, vec![1, s], (1, 2), answer).unwrap();
            if corrupted_run(c, &inp, cfg).unwrap() < 1.0 {
                out.push(inp);
            }
            if out.len() == n {
                break;
            }
        }
        assert_eq!(out.len(), n, "not enough corruptible inputs");
        out
    }

    #[test]
    fn trace_finds_the_storing_mlp() {
        let c = storing_model();
        let cfg = TraceConfig { top_k: 1, ..Default::default() };
        let inp = &stored_inputs(&c, &cfg, 1)[0];
        let grid = trace_grid(&c, inp, &cfg).unwrap();
        assert_eq!(grid.p_clean, 1.0);
        let mlp = grid.kind_scores(SiteKind::Mlp).unwrap();
        assert_eq!(mlp[1][1], 1.0);
        assert_eq!(mlp[1][0], grid.p_corr);
        assert_eq!(top_k_layers(&grid, SiteKind::Mlp, 1).unwrap(), vec![1]);
    }

    #[test]
    fn decoupling_keeps_the_shared_layer() {
        let c = storing_model();
        let cfg = TraceConfig { top_k: 1, kinds: vec![SiteKind::Mlp, SiteKind::Block], ..Default::default() };
        let inputs = stored_inputs(&c, &cfg, 3);
        let located = decouple_inputs(&c, &inputs, &cfg).unwrap();
        assert_eq!(located[&SiteKind::Mlp], vec![1]);

        let mut reversed = inputs.clone();
        reversed.reverse();
        assert_eq!(decouple_inputs(&c, &reversed, &cfg).unwrap(), located);

        let same = vec![inputs[0].clone(), inputs[0].clone()];
        let grid = trace_grid(&c, &inputs[0], &cfg).unwrap();
        let single = decouple_inputs(&c, &same, &cfg).unwrap();
        for kind in &cfg.kinds {
            assert_eq!(single[kind], top_k_layers(&grid, *kind, 1).unwrap());
        }
        assert!(decouple_inputs(&c, &inputs[..1], &cfg).is_err());
    }

    #[test]
    fn decouple_needs_an_entity_and_two_names() {
        let vocab = crate::dataset::toy_vocabulary(200).unwrap();
        let c = init_model(&ModelConfig::new(200, 8, 2, 2, 32, 1)).unwrap();
        let mut rec = crate::dataset::generate_toy_corpus(0, 1, &vocab).unwrap().records.remove(0);
        let cfg = TraceConfig { top_k: 1, kinds: vec![SiteKind::Mlp], ..Default::default() };
        assert!(decouple(&c, &vocab, &rec, &["Alice"], &cfg).is_err());
        let located = decouple(&c, &vocab, &rec, &["Alice", "Bob"], &cfg).unwrap();
        assert!(located[&SiteKind::Mlp].len() <= 1);
        rec = rec.substitute("PersonX", "Carol").unwrap();
        assert!(decouple(&c, &vocab, &rec, &["Alice", "Bob"], &cfg).is_err());
    }

    #[test]
    fn recall_profile_of_silent_sublayers() {
        let mut c = init_model(&ModelConfig::new(120, 8, 3, 2, 8, 5)).unwrap();
        for l in &mut c.layers {
            l.w_o_attn.scale(0.0);
            l.w_o_mlp.scale(0.0);
        }
        c.layers[1].w_o_mlp = init_model(&ModelConfig::new(120, 8, 3, 2, 8, 6)).unwrap().layers[1]
            .w_o_mlp
            .clone();
        c.layers[1].w_o_mlp.scale(50.0);
        let p = recall_profile(&c, &[3, 7, 9]).unwrap();
        assert_eq!(p.entries.len(), 6);
        for e in &p.entries {
            assert!((-1.0..=1.0).contains(&e.cosine));
            assert!((0.0..=1.0).contains(&e.simpson));
            assert!(e.candidates_in.len() <= RECALL_CANDIDATES);
            if !(e.layer == 1 && e.kind == SiteKind::Mlp) {
                assert_eq!(e.cosine, 1.0);
                assert_eq!(e.simpson, 1.0);
            }
        }
        let rewrite = p.get(1, SiteKind::Mlp).unwrap();
        assert!(rewrite.cosine < 1.0 && rewrite.simpson < 1.0);
        let min = p.entries.iter().min_by(|a, b| a.cosine.total_cmp(&b.cosine)).unwrap();
        assert_eq!((min.layer, min.kind), (1, SiteKind::Mlp));
        assert_eq!(p.to_csv().lines().count(), 7);
        assert!(recall_profile(&c, &[]).is_err());
    }
}
