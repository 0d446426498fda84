// SPDX-License-Identifier: MIT OR Apache-2.0

//! Editing metrics and their aggregate score.
//!
//! Every comparison is [`target_similarity`] (bag-of-tokens F1) between
//! greedy decodes. Per-record metrics with nothing to measure (a record
//! without paraphrases, say) are `None` and left out of the averages; an
//! average over no records at all is 1.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{CKRecord, EncodedCase};
use crate::editor::EditReceipt;
use crate::error::{DemError, Result};
use crate::localization::target_similarity;
use crate::model::{generate_greedy, Checkpoint, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Decode budget when comparing edited and original continuations.
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_new: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEval {
    pub case_id: u64,
    pub efficacy: f64,
    pub generalization: Option<f64>,
    pub specificity: Option<f64>,
    pub consistency: Option<f64>,
    pub commonsense: Option<f64>,
    pub fluency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub consistency: f64,
    pub commonsense: f64,
    pub fluency: f64,
    pub score: f64,
    pub records: Vec<RecordEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per record; empty cells where a metric does not apply.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out =
            String::from("case_id,efficacy,generalization,specificity,consistency,commonsense,fluency\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.case_id,
                r.efficacy,
                cell(r.generalization),
                cell(r.specificity),
                cell(r.consistency),
                cell(r.commonsense),
                cell(r.fluency)
            );
        }
        out
    }
}

/// Harmonic mean; 0 if any value is 0.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DemError::InvalidInput("harmonic mean of nothing".into()));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(DemError::InvalidInput(format!("harmonic mean of {v}")));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

fn entropy_of<T: Ord + Clone>(items: impl Iterator<Item = T>) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut n = 0usize;
    for it in items {
        *counts.entry(it).or_insert(0usize) += 1;
        n += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// `2/3 · H(bigrams) + 1/3 · H(trigrams)`, base 2.
pub fn fluency(tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 3 {
        return Err(DemError::InvalidInput(format!(
            "fluency needs at least 3 tokens, got {}",
            tokens.len()
        )));
    }
    let bi = entropy_of(tokens.windows(2));
    let tri = entropy_of(tokens.windows(3));
    Ok(2.0 / 3.0 * bi + 1.0 / 3.0 * tri)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn decode(ckpt: &Checkpoint, prompt: &[TokenId], n: usize, stop: Option<TokenId>) -> Result<Vec<TokenId>> {
    let room = ckpt.config.max_seq.saturating_sub(prompt.len());
    generate_greedy(ckpt, prompt, n.min(room), stop, &[])
}

/// Agreement of two continuations; two empty ones agree.
fn agreement(edited: &[TokenId], original: &[TokenId]) -> Result<f64> {
    if original.is_empty() {
        return Ok(if edited.is_empty() { 1.0 } else { 0.0 });
    }
    target_similarity(edited, original)
}

/// Metrics of one record on a model edited for it.
pub fn evaluate_record(
    edited: &Checkpoint,
    original: &Checkpoint,
    vocab: &Vocabulary,
    record: &CKRecord,
    cfg: &EvalConfig,
) -> Result<RecordEval> {
    let case = EncodedCase::encode(record, vocab)?;
    let target = &case.target_new;
    let eot = Some(vocab.eot());

    let main = decode(edited, &case.prompt, target.len(), None)?;
    let efficacy = target_similarity(&main, target)?;

    let para: Vec<Vec<TokenId>> = case
        .paraphrases
        .iter()
        .map(|p| decode(edited, p, target.len(), None))
        .collect::<Result<_>>()?;
    let generalization = mean(
        &para
            .iter()
            .map(|d| target_similarity(d, target))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut pairs = Vec::new();
    for i in 0..para.len() {
        for j in i + 1..para.len() {
            pairs.push(agreement(&para[i], &para[j])?);
        }
    }
    let consistency = mean(&pairs);

    let compare = |prompts: &[Vec<TokenId>]| -> Result<Option<f64>> {
        let scores = prompts
            .iter()
            .map(|p| {
                agreement(
                    &decode(edited, p, cfg.max_new, eot)?,
                    &decode(original, p, cfg.max_new, eot)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&scores))
    };
    let specificity = compare(&case.neighborhood)?;
    let commonsense = compare(&case.sub_neighborhood)?;

    let fl: Vec<f64> = std::iter::once(&main)
        .chain(&para)
        .filter(|d| d.len() >= 3)
        .map(|d| fluency(d))
        .collect::<Result<_>>()?;

    Ok(RecordEval {
        case_id: record.case_id,
        efficacy,
        generalization,
        specificity,
        consistency,
        commonsense,
        fluency: mean(&fl),
    })
}

/// Averages per-record metrics into a report.
pub fn aggregate(records: Vec<RecordEval>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(DemError::InvalidInput("no records to evaluate".into()));
    }
    let avg = |f: fn(&RecordEval) -> Option<f64>, empty: f64| {
        let v: Vec<f64> = records.iter().filter_map(f).collect();
        mean(&v).unwrap_or(empty)
    };
    let efficacy = avg(|r| Some(r.efficacy), 1.0);
    let generalization = avg(|r| r.generalization, 1.0);
    let specificity = avg(|r| r.specificity, 1.0);
    let consistency = avg(|r| r.consistency, 1.0);
    let commonsense = avg(|r| r.commonsense, 1.0);
    let fluency = avg(|r| r.fluency, 0.0);
    let score = harmonic_mean(&[efficacy, generalization, specificity, commonsense])?;
    Ok(EvalReport {
        efficacy,
        generalization,
        specificity,
        consistency,
        commonsense,
        fluency,
        score,
        records,
    })
}

/// Evaluates every record against one edited checkpoint. Each record needs
/// the receipt of its edit.
pub fn evaluate(
    edited: &Checkpoint,
    original: &Checkpoint,
    vocab: &Vocabulary,
    records: &[CKRecord],
    receipts: &[EditReceipt],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(DemError::InvalidInput("no records to evaluate".into()));
    }
    let edited_ids: BTreeSet<u64> = receipts.iter().map(|r| r.case_id).collect();
    let record_ids: BTreeSet<u64> = records.iter().map(|r| r.case_id).collect();
    if let Some(id) = record_ids.difference(&edited_ids).next() {
        return Err(DemError::InvalidInput(format!("case {id} has no edit receipt")));
    }
    if let Some(id) = edited_ids.difference(&record_ids).next() {
        return Err(DemError::InvalidInput(format!("receipt for case {id} has no record")));
    }
    if edited.config != original.config {
        return Err(DemError::Dimension("edited and original models differ in shape".into()));
    }
    let per = records
        .iter()
        .map(|r| evaluate_record(edited, original, vocab, r, cfg))
        .collect::<Result<Vec<_>>>()?;
    aggregate(per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_corpus, toy_vocabulary};
    use crate::editor::{apply_edit, CovarianceCache, EditConfig, EditRequest};
    use crate::model::{init_model, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(&[1.0, 1.0, 1.0, 0.5]).unwrap() - 0.8).abs() < 1e-9);
        assert_eq!(harmonic_mean(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(harmonic_mean(&[0.25]).unwrap(), 0.25);
        assert!(harmonic_mean(&[]).is_err());
        assert!(harmonic_mean(&[f64::NAN]).is_err());
    }

    #[test]
    fn fluency_examples() {
        assert_eq!(fluency(&[1, 1, 1, 1, 1]).unwrap(), 0.0);
        // all bigrams distinct: bigram entropy log2(m)
        let distinct = [1, 2, 3, 4, 5];
        let f = fluency(&distinct).unwrap();
        assert!((f - (2.0 / 3.0 * 4f64.log2() + 1.0 / 3.0 * 3f64.log2())).abs() < 1e-12);
        // "a b a b a": bigrams ab ba ab ba, trigrams aba bab aba
        let tri = -(2.0 / 3.0 * (2.0f64 / 3.0).log2() + 1.0 / 3.0 * (1.0f64 / 3.0).log2());
        let f = fluency(&[1, 2, 1, 2, 1]).unwrap();
        assert!((f - (2.0 / 3.0 * 1.0 + tri / 3.0)).abs() < 1e-12);
        assert!(fluency(&[1, 2]).is_err());
    }

    proptest! {
        #[test]
        fn score_is_order_free(vals in prop::collection::vec(0.01f64..1.0, 4)) {
            let mut rev = vals.clone();
            rev.reverse();
            let a = harmonic_mean(&vals).unwrap();
            prop_assert!((a - harmonic_mean(&rev).unwrap()).abs() < 1e-12);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(0.0, f64::max);
            prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }

        #[test]
        fn fluency_is_nonnegative(t in prop::collection::vec(0u32..5, 3..20)) {
            prop_assert!(fluency(&t).unwrap() >= 0.0);
        }
    }

    fn setup() -> (Checkpoint, Vocabulary, Vec<CKRecord>) {
        let vocab = toy_vocabulary(200).unwrap();
        let mut c = init_model(&ModelConfig::new(200, 16, 2, 2, 32, 9)).unwrap();
        for (_, t) in c.tensors_mut() {
            t.scale(3.0);
        }
        let records = generate_toy_corpus(1, 4, &vocab).unwrap().records;
        (c, vocab, records)
    }

    fn fake_receipts(c: &Checkpoint, vocab: &Vocabulary, records: &[CKRecord]) -> Vec<EditReceipt> {
        let mut cov = CovarianceCache::new(vec![vec![2, 3, 4, 5, 6, 7]], 1.0);
        records
            .iter()
            .map(|r| {
                let req = EditRequest::from_record(r, vocab, 1, Default::default()).unwrap();
                let cfg = EditConfig {
                    k: 1,
                    delta: crate::editor::DeltaOptimConfig {
                        steps: 1,
                        ..Default::default()
                    },
                    ..Default::default()
                };
                apply_edit(c, &req, &cfg, &mut cov).unwrap().1
            })
            .collect()
    }

    #[test]
    fn unedited_model_is_perfectly_specific() {
        let (c, vocab, records) = setup();
        let receipts = fake_receipts(&c, &vocab, &records);
        let report = evaluate(&c, &c, &vocab, &records, &receipts, &EvalConfig::default()).unwrap();
        assert_eq!(report.specificity, 1.0);
        assert_eq!(report.commonsense, 1.0);
        assert_eq!(report.records.len(), 4);
        for v in [report.efficacy, report.generalization, report.consistency, report.score] {
            assert!((0.0..=1.0).contains(&v));
        }
        let again = evaluate(&c, &c, &vocab, &records, &receipts, &EvalConfig::default()).unwrap();
        assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
        assert_eq!(report.to_csv().lines().count(), 5);
    }

    #[test]
    fn exact_targets_give_full_efficacy() {
        let (c, vocab, mut records) = setup();
        // point each record's target at whatever the model already says
        for r in &mut records {
            let case = EncodedCase::encode(r, &vocab).unwrap();
            let out = decode(&c, &case.prompt, case.target_new.len(), None).unwrap();
            r.target_new = vocab.decode(&out);
        }
        let per = records
            .iter()
            .map(|r| evaluate_record(&c, &c, &vocab, r, &EvalConfig::default()).unwrap())
            .collect::<Vec<_>>();
        let report = aggregate(per).unwrap();
        assert_eq!(report.efficacy, 1.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let (c, vocab, records) = setup();
        let receipts = fake_receipts(&c, &vocab, &records);
        let cfg = EvalConfig::default();
        assert!(evaluate(&c, &c, &vocab, &records[..3], &receipts, &cfg).is_err());
        assert!(evaluate(&c, &c, &vocab, &records, &receipts[..3], &cfg).is_err());
        assert!(evaluate(&c, &c, &vocab, &[], &[], &cfg).is_err());
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn missing_metrics_are_skipped() {
        let rec = |id, g| RecordEval {
            case_id: id,
            efficacy: 0.5,
            generalization: g,
            specificity: None,
            consistency: None,
            commonsense: Some(1.0),
            fluency: None,
        };
        let r = aggregate(vec![rec(0, Some(1.0)), rec(1, None)]).unwrap();
        assert_eq!(r.generalization, 1.0);
        assert_eq!(r.specificity, 1.0);
        assert_eq!(r.efficacy, 0.5);
        assert_eq!(r.fluency, 0.0);
        let csv = r.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("1,0.5,,,,1,"));
    }
}
