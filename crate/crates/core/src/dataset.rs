// SPDX-License-Identifier: MIT OR Apache-2.0

//! Commonsense editing records, the relation template registry and a
//! seeded toy corpus generator.
//!
//! Records are JSONL, one object per line:
//!
//! ```json
//! {"case_id": 0, "relation": "xWant",
//!  "prompt": "PersonX about to get married, as a result, PersonX wants to",
//!  "subject": {"text": "PersonX about to get married", "start": 0, "end": 5},
//!  "target_new": "live happily ever after",
//!  "paraphrase_prompts": [], "neighborhood_prompts": [], "sub_neighborhood_prompts": []}
//! ```
//!
//! Subject spans are token offsets (`end` exclusive) into the prompt as
//! split by [`split_words`]. `target_true`, when present, is the answer the
//! unedited model is expected to produce.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DemError, Result};
use crate::model::{split_words, TokenId, TrainSequence, Vocabulary, EOT, UNK};

/// One relation of the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationTemplate {
    pub name: &'static str,
    /// Human-readable template text.
    pub template: &'static str,
    /// Variant used when the events do not mention the template's person.
    pub starred: Option<&'static str>,
    /// Sample count of the relation in the source knowledge base.
    pub size: usize,
}

const fn rel(
    name: &'static str,
    template: &'static str,
    starred: Option<&'static str>,
    size: usize,
) -> RelationTemplate {
    RelationTemplate {
        name,
        template,
        starred,
        size,
    }
}

/// The 23 relations.
pub const RELATIONS: [RelationTemplate; 23] = [
    rel("oWant", "as a result, personY want to", Some("as a result, others want to"), 7775),
    rel("xEffect", "as a result, PersonX will", Some("resulting in"), 13862),
    rel("xIntent", "because PersonX wanted", Some("which means"), 8558),
    rel("xNeed", "which means PersonX need", None, 13734),
    rel("xWant", "as a result, PersonX wants", None, 7775),
    rel("xReact", "which indicates that personX", None, 10689),
    rel("oEffect", "resulting in personY", Some("resulting in others"), 5181),
    rel("oReact", "and personY's reaction is", Some("and others's reaction is"), 4740),
    rel("xAttr", "which means that PersonX", Some("which means that"), 19441),
    rel("AtLocation", "located in the", None, 234),
    rel("ObjectUse", "are used to", None, 311),
    rel("Desires", "desires", None, 271),
    rel("HasProperty", "has the property of", None, 428),
    rel("NotDesires", "have no desire to", None, 287),
    rel("Causes", "causes", None, 322),
    rel("HasSubEvent", "The sub event of E1 is to E2", None, 118),
    rel("xReason", "The reason for E1 is E2", None, 290),
    rel("CapableOf", "is/are capable of", None, 512),
    rel("MadeUpOf", "made up of", None, 291),
    rel("isAfter", "happens after", None, 465),
    rel("isBefore", "happens before", None, 164),
    rel("isFilledBy", "blank can be filled by", None, 174),
    rel("HinderedBy", "can be hindered by", None, 612),
];

pub fn relation(name: &str) -> Result<&'static RelationTemplate> {
    RELATIONS
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| DemError::UnknownRelation(name.to_string()))
}

impl RelationTemplate {
    /// The person token the main template refers to, if any.
    fn person(&self) -> Option<&'static str> {
        let t = self.template.to_ascii_lowercase();
        if t.contains("personx") {
            Some("personx")
        } else if t.contains("persony") {
            Some("persony")
        } else {
            None
        }
    }

    /// Prompt patterns for the main and (optional) starred variants. `{E1}`
    /// marks the first event; the target always follows the prompt.
    fn patterns(&self, starred: bool) -> Vec<String> {
        let text = match (starred, self.starred) {
            (true, Some(s)) => s,
            _ => self.template,
        };
        if let Some(rest) = text.strip_suffix(" E2") {
            // Event embedded inside the template text.
            return vec![rest.replacen("E1", "{E1}", 1)];
        }
        if text.contains("is/are") {
            return ["is", "are"]
                .iter()
                .map(|v| format!("{{E1}}, {}", text.replace("is/are", v)))
                .collect();
        }
        vec![format!("{{E1}}, {text}")]
    }

    /// Whether `prompt` contains the fixed text of any template variant.
    pub fn matches_prompt(&self, prompt: &str) -> bool {
        let norm = normalized_words(prompt);
        let mut variants = self.patterns(false);
        if self.starred.is_some() {
            variants.extend(self.patterns(true));
        }
        variants.iter().any(|p| {
            p.split("{E1}")
                .map(normalized_words)
                .filter(|f| !f.is_empty())
                .all(|frag| contains_words(&norm, &frag))
        })
    }
}

fn normalized_words(text: &str) -> Vec<String> {
    split_words(text).into_iter().map(|w| w.to_lowercase()).collect()
}

/// Subsequence match where the template persons match any single word, so
/// entity-substituted prompts still validate.
fn contains_words(haystack: &[String], needle: &[String]) -> bool {
    let word_eq = |h: &String, n: &String| h == n || n == "personx" || n == "persony";
    needle.is_empty()
        || haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(h, n)| word_eq(h, n)))
}

/// A prompt built from a relation template, plus its target slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewrittenPrompt {
    pub prompt: String,
    pub target: String,
    pub starred: bool,
}

/// Builds the prompt for `(event1, relation, event2)`.
///
/// The starred variant is used when neither event mentions the person the
/// main template refers to (PersonX / PersonY).
pub fn rewrite_template(relation_name: &str, event1: &str, event2: &str) -> Result<RewrittenPrompt> {
    let r = relation(relation_name)?;
    let starred = match (r.starred, r.person()) {
        (Some(_), Some(person)) => {
            let mentions = |e: &str| e.to_ascii_lowercase().contains(person);
            !mentions(event1) && !mentions(event2)
        }
        _ => false,
    };
    let pattern = &r.patterns(starred)[0];
    Ok(RewrittenPrompt {
        prompt: pattern.replace("{E1}", event1.trim()),
        target: event2.trim().to_string(),
        starred,
    })
}

/// Strips unrecognized markers (`___`) and invalid characters (`&`) from
/// raw knowledge-base text and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    text.replace("___", " ")
        .replace('&', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Subject text and its token span in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One editing case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CKRecord {
    pub case_id: u64,
    pub relation: String,
    pub prompt: String,
    pub subject: Subject,
    pub target_new: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_true: Option<String>,
    #[serde(default)]
    pub paraphrase_prompts: Vec<String>,
    #[serde(default)]
    pub neighborhood_prompts: Vec<String>,
    #[serde(default)]
    pub sub_neighborhood_prompts: Vec<String>,
}

impl CKRecord {
    /// Checks the record invariants; the message names the failing field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let rel = relation(&self.relation).map_err(|e| e.to_string())?;
        let tokens = split_words(&self.prompt);
        if tokens.is_empty() {
            return Err("prompt is empty".into());
        }
        let Subject { text, start, end } = &self.subject;
        if end <= start {
            return Err(format!("subject span end {end} must be greater than start {start}"));
        }
        if *end > tokens.len() {
            return Err(format!(
                "subject span end {end} exceeds prompt length {}",
                tokens.len()
            ));
        }
        if split_words(text) != tokens[*start..*end] {
            return Err(format!(
                "subject span [{start}, {end}) is `{}`, not the subject `{text}`",
                tokens[*start..*end].join(" ")
            ));
        }
        if split_words(&self.target_new).is_empty() {
            return Err("target_new is empty".into());
        }
        if let Some(t) = &self.target_true {
            if split_words(t).is_empty() {
                return Err("target_true is empty".into());
            }
        }
        if !rel.matches_prompt(&self.prompt) {
            return Err(format!(
                "prompt does not contain the `{}` template phrase",
                self.relation
            ));
        }
        Ok(())
    }

    /// The answer tracing runs score against: `target_true` when known,
    /// otherwise `target_new`.
    pub fn trace_target(&self) -> &str {
        self.target_true.as_deref().unwrap_or(&self.target_new)
    }

    /// Same record with every whole-word `from` replaced by `to` in all text
    /// fields. Subject span offsets are unchanged since the substitution is
    /// one word for one word.
    pub fn substitute(&self, from: &str, to: &str) -> Result<CKRecord> {
        if split_words(to).len() != 1 {
            return Err(DemError::InvalidInput(format!("substitute `{to}` must be a single word")));
        }
        let swap = |s: &str| {
            s.split(' ')
                .map(|w| {
                    let core = w.trim_end_matches([',', '.', ';', ':', '!', '?', '\'']);
                    if core == from {
                        format!("{to}{}", &w[core.len()..])
                    } else {
                        w.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = self.clone();
        out.prompt = swap(&self.prompt);
        out.subject.text = swap(&self.subject.text);
        out.target_new = swap(&self.target_new);
        out.target_true = self.target_true.as_deref().map(swap);
        for v in [
            &mut out.paraphrase_prompts,
            &mut out.neighborhood_prompts,
            &mut out.sub_neighborhood_prompts,
        ] {
            for s in v.iter_mut() {
                *s = swap(s);
            }
        }
        Ok(out)
    }
}

/// Parses and validates JSONL records; errors carry 1-based line numbers.
pub fn parse_records(text: &str, normalize: bool) -> Result<Vec<CKRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: CKRecord = serde_json::from_str(line).map_err(|e| DemError::Record {
            line: line_no,
            message: format!("malformed JSON: {e}"),
        })?;
        if normalize {
            rec.prompt = normalize_text(&rec.prompt);
            rec.subject.text = normalize_text(&rec.subject.text);
            rec.target_new = normalize_text(&rec.target_new);
            rec.target_true = rec.target_true.as_deref().map(normalize_text);
            for v in [
                &mut rec.paraphrase_prompts,
                &mut rec.neighborhood_prompts,
                &mut rec.sub_neighborhood_prompts,
            ] {
                for s in v.iter_mut() {
                    *s = normalize_text(s);
                }
            }
        }
        rec.validate().map_err(|message| DemError::Record {
            line: line_no,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<CKRecord>> {
    parse_records(&std::fs::read_to_string(path)?, false)
}

/// As [`load_records`], with [`normalize_text`] applied to every text field
/// before validation.
pub fn load_records_normalized(path: impl AsRef<Path>) -> Result<Vec<CKRecord>> {
    parse_records(&std::fs::read_to_string(path)?, true)
}

pub fn records_to_jsonl(records: &[CKRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_records(records: &[CKRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, records_to_jsonl(records)?)?;
    Ok(())
}

/// A tokenized prompt with the position of the last subject token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub tokens: Vec<TokenId>,
    pub subject_last: usize,
}

/// Token-level view of a record under a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCase {
    pub case_id: u64,
    pub prompt: Vec<TokenId>,
    /// `[start, end)` of the subject in `prompt`.
    pub subject: (usize, usize),
    pub target_new: Vec<TokenId>,
    pub target_true: Option<Vec<TokenId>>,
    pub paraphrases: Vec<Vec<TokenId>>,
    pub neighborhood: Vec<Vec<TokenId>>,
    pub sub_neighborhood: Vec<Vec<TokenId>>,
}

impl EncodedCase {
    pub fn encode(record: &CKRecord, vocab: &Vocabulary) -> Result<Self> {
        let enc = |s: &str| vocab.encode_strict(s);
        let encode_all = |v: &[String]| v.iter().map(|s| enc(s)).collect::<Result<Vec<_>>>();
        Ok(Self {
            case_id: record.case_id,
            prompt: enc(&record.prompt)?,
            subject: (record.subject.start, record.subject.end),
            target_new: enc(&record.target_new)?,
            target_true: record.target_true.as_deref().map(enc).transpose()?,
            paraphrases: encode_all(&record.paraphrase_prompts)?,
            neighborhood: encode_all(&record.neighborhood_prompts)?,
            sub_neighborhood: encode_all(&record.sub_neighborhood_prompts)?,
        })
    }

    pub fn subject_tokens(&self) -> &[TokenId] {
        &self.prompt[self.subject.0..self.subject.1]
    }

    pub fn subject_last(&self) -> usize {
        self.subject.1 - 1
    }

    /// Target that tracing scores against.
    pub fn trace_target(&self) -> &[TokenId] {
        self.target_true.as_deref().unwrap_or(&self.target_new)
    }

    /// Paraphrases in which the subject can be located, as encoded prompts.
    pub fn located_paraphrases(&self) -> Vec<EncodedPrompt> {
        let subj = self.subject_tokens();
        self.paraphrases
            .iter()
            .filter_map(|p| {
                locate(p, subj).map(|(_, end)| EncodedPrompt {
                    tokens: p.clone(),
                    subject_last: end - 1,
                })
            })
            .collect()
    }
}

/// First occurrence of `needle` in `haystack` as `[start, end)`.
pub fn locate(haystack: &[TokenId], needle: &[TokenId]) -> Option<(usize, usize)> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|s| (s, s + needle.len()))
}

/// Person names used for entity substitution.
pub const PERSON_NAMES: [&str; 6] = ["Alice", "Bob", "Carol", "Dave", "Erin", "Frank"];

/// Sentence openers used to build prefix-augmented paraphrases.
pub const PARAPHRASE_PREFIXES: [&str; 5] = [
    "Yesterday,",
    "In the story,",
    "As everyone knows,",
    "It is said that",
    "Later that day,",
];

/// Every word the templates, names and prefixes need.
pub fn reserved_words() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in &RELATIONS {
        for starred in [false, true] {
            for p in r.patterns(starred) {
                out.extend(split_words(&p.replace("{E1}", " ")));
            }
        }
    }
    out.extend(["PersonX", "PersonY", ","].map(String::from));
    out.extend(PERSON_NAMES.map(String::from));
    for p in PARAPHRASE_PREFIXES {
        out.extend(split_words(p));
    }
    out
}

/// Synthetic records plus the sequences a model must memorize so that the
/// records carry signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub records: Vec<CKRecord>,
    /// `prompt ⊕ answer ⊕ <eot>` with loss on the answer and stop token.
    pub sequences: Vec<TrainSequence>,
}

const MIN_TARGET: usize = 3;
const MAX_TARGET: usize = 6;
const N_VERBS: usize = 10;
const MAX_BANK: usize = 24;

/// Generates `n_records` deterministic records cycling through the 23
/// relations.
///
/// Subjects are `PersonX <verb> <noun>` with verbs and nouns reused across
/// subjects, so a subject is only identified by the pair. Answers come from
/// a bank of 3–6 token phrases with disjoint words, each phrase answering
/// several prompts; `target_new` is a bank phrase other than `target_true`.
/// Every record has two prefix-augmented paraphrases, one neighborhood
/// prompt (same subject, different relation) and one sub-neighborhood
/// prompt (same relation, different subject). Content words are the
/// vocabulary entries not used by templates.
pub fn generate_toy_corpus(seed: u64, n_records: usize, vocab: &Vocabulary) -> Result<ToyCorpus> {
    if n_records == 0 {
        return Err(DemError::InvalidInput("n_records must be at least 1".into()));
    }
    let reserved = reserved_words();
    if let Some(missing) = reserved.iter().find(|w| vocab.id(w).is_none()) {
        return Err(DemError::InvalidInput(format!(
            "vocabulary too small: template word `{missing}` missing"
        )));
    }
    let content: Vec<&str> = vocab
        .tokens()
        .iter()
        .map(String::as_str)
        .filter(|t| *t != UNK && *t != EOT && !reserved.contains(*t))
        .collect();
    let n_subjects = 2 * n_records;
    let n_nouns = n_subjects.div_ceil(N_VERBS);
    let free = content.len().saturating_sub(N_VERBS + n_nouns);
    let bank_size = (n_records / 2).clamp(4, MAX_BANK).min(free / MAX_TARGET);
    if bank_size < 2 {
        return Err(DemError::InvalidInput(format!(
            "vocabulary too small: {} content words for {n_records} records",
            content.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut content = content;
    content.shuffle(&mut rng);
    let verbs = &content[..N_VERBS];
    let nouns = &content[N_VERBS..N_VERBS + n_nouns];
    let mut words = content[N_VERBS + n_nouns..].iter();
    let bank: Vec<String> = (0..bank_size)
        .map(|_| {
            let len = rng.gen_range(MIN_TARGET..=MAX_TARGET);
            words.by_ref().take(len).copied().collect::<Vec<_>>().join(" ")
        })
        .collect();

    let mut pairs: Vec<(usize, usize)> = (0..N_VERBS)
        .flat_map(|v| (0..n_nouns).map(move |n| (v, n)))
        .collect();
    pairs.shuffle(&mut rng);
    let subjects: Vec<String> = pairs[..n_subjects]
        .iter()
        .map(|&(v, n)| format!("PersonX {} {}", verbs[v], nouns[n]))
        .collect();

    let mut records = Vec::with_capacity(n_records);
    let mut sequences = Vec::new();
    let mut memorize = |prompt: &str, answer: &str| -> Result<()> {
        let mut tokens = vocab.encode_strict(prompt)?;
        let loss_from = tokens.len();
        tokens.extend(vocab.encode_strict(answer)?);
        tokens.push(vocab.eot());
        sequences.push(TrainSequence::new(tokens, loss_from));
        Ok(())
    };

    for i in 0..n_records {
        let rel = &RELATIONS[i % RELATIONS.len()];
        let subject = &subjects[2 * i];
        let true_idx = rng.gen_range(0..bank_size);
        let new_idx = (true_idx + rng.gen_range(1..bank_size)) % bank_size;
        let target_true = bank[true_idx].clone();
        let target_new = bank[new_idx].clone();
        let main = rewrite_template(rel.name, subject, &target_true)?;
        let subject_tokens = split_words(subject);
        let prompt_tokens = split_words(&main.prompt);
        let start = prompt_tokens
            .windows(subject_tokens.len())
            .position(|w| w == subject_tokens.as_slice())
            .expect("subject is inside its own prompt");

        let mut prefixes: Vec<&str> = PARAPHRASE_PREFIXES.to_vec();
        prefixes.shuffle(&mut rng);
        let paraphrases: Vec<String> = prefixes[..2]
            .iter()
            .map(|p| format!("{p} {}", main.prompt))
            .collect();

        let other = loop {
            let r = &RELATIONS[rng.gen_range(0..RELATIONS.len())];
            if r.name != rel.name {
                break r;
            }
        };
        let neighbor_answer = &bank[rng.gen_range(0..bank_size)];
        let neighbor = rewrite_template(other.name, subject, neighbor_answer)?;

        let sub_subject = &subjects[2 * i + 1];
        let sub_answer = &bank[rng.gen_range(0..bank_size)];
        let sub = rewrite_template(rel.name, sub_subject, sub_answer)?;

        memorize(&main.prompt, &target_true)?;
        for p in &paraphrases {
            memorize(p, &target_true)?;
        }
        memorize(&neighbor.prompt, neighbor_answer)?;
        memorize(&sub.prompt, sub_answer)?;

        records.push(CKRecord {
            case_id: i as u64,
            relation: rel.name.to_string(),
            prompt: main.prompt,
            subject: Subject {
                text: subject.clone(),
                start,
                end: start + subject_tokens.len(),
            },
            target_new,
            target_true: Some(target_true),
            paraphrase_prompts: paraphrases,
            neighborhood_prompts: vec![neighbor.prompt],
            sub_neighborhood_prompts: vec![sub.prompt],
        });
    }
    Ok(ToyCorpus { records, sequences })
}

/// Vocabulary with the specials, every reserved word and `w000`-style
/// content words up to `size` entries.
pub fn toy_vocabulary(size: usize) -> Result<Vocabulary> {
    let mut tokens = vec![UNK.to_string(), EOT.to_string()];
    tokens.extend(reserved_words());
    if tokens.len() > size {
        return Err(DemError::InvalidInput(format!(
            "vocabulary size {size} cannot hold the {} reserved tokens",
            tokens.len()
        )));
    }
    let n = size - tokens.len();
    tokens.extend((0..n).map(|i| format!("w{i:03}")));
    Vocabulary::new(tokens)
}
