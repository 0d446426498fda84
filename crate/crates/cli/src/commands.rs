// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use dem_core::dataset::{load_records, load_records_normalized, records_to_jsonl, CKRecord};
use dem_core::editor::{
    apply_edit, covariance_corpus, CovarianceCache, DeltaOptimConfig, EditConfig, EditMode,
    EditReceipt, EditRequest,
};
use dem_core::eval::{evaluate, EvalConfig};
use dem_core::localization::{
    decouple, recall_profile, top_k_layers, trace_grid, TraceConfig, TraceInput,
};
use dem_core::model::{Checkpoint, SiteKind, Vocabulary};
use dem_core::toy::{build_toy_suite, ToySuiteConfig};

use crate::run_dir::{file_hash, RunDir};
use crate::{
    CliError, DatasetArgs, EditArgs, EvalArgs, ModelInputs, ToyInitArgs, TraceArgs,
};

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{flag} {}: no such directory", path.display())))
    }
}

fn load_model(flag: &str, path: &Path) -> Result<Checkpoint, CliError> {
    require_file(flag, path)?;
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(format!("{flag} {}", path.display())))
}

struct Loaded {
    ckpt: Checkpoint,
    vocab: Vocabulary,
    records: Vec<CKRecord>,
    selected: Vec<CKRecord>,
    hashes: Value,
}

fn load_inputs(inputs: &ModelInputs) -> Result<Loaded, CliError> {
    let vocab_path = inputs.vocab_path();
    require_file("--model", &inputs.model)?;
    require_file("--vocab", &vocab_path)?;
    require_file("--data", &inputs.data)?;
    let ckpt = load_model("--model", &inputs.model)?;
    let vocab = Vocabulary::load(&vocab_path)
        .map_err(|e| CliError::from(e).context(format!("--vocab {}", vocab_path.display())))?;
    if vocab.len() != ckpt.config.vocab_size {
        return Err(CliError::usage(format!(
            "--vocab has {} entries but the model expects {}",
            vocab.len(),
            ckpt.config.vocab_size
        )));
    }
    let records = load_records(&inputs.data)
        .map_err(|e| CliError::from(e).context(format!("--data {}", inputs.data.display())))?;
    let selected = if inputs.cases.is_empty() {
        records.clone()
    } else {
        if let Some(id) = inputs
            .cases
            .iter()
            .find(|id| !records.iter().any(|r| r.case_id == **id))
        {
            return Err(CliError::usage(format!("--cases: no record with case id {id}")));
        }
        records
            .iter()
            .filter(|r| inputs.cases.contains(&r.case_id))
            .cloned()
            .collect()
    };
    let hashes = json!({
        "model": file_hash("--model", &inputs.model)?,
        "vocab": file_hash("--vocab", &vocab_path)?,
        "data": file_hash("--data", &inputs.data)?,
        "cases": inputs.cases,
    });
    Ok(Loaded {
        ckpt,
        vocab,
        records,
        selected,
        hashes,
    })
}

/// Same layout as [`Vocabulary::save`].
fn vocab_bytes(vocab: &Vocabulary) -> Vec<u8> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    text.into_bytes()
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn layer_list(layers: &[usize]) -> String {
    let s: Vec<String> = layers.iter().map(usize::to_string).collect();
    if s.is_empty() {
        "-".into()
    } else {
        s.join(",")
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::runtime(format!("stdout: {e}")))
}

pub fn trace(args: &TraceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let kinds = args
        .kinds
        .iter()
        .map(|k| k.parse::<SiteKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::usage(format!("--kinds: {e}")))?;
    let cfg = TraceConfig {
        sigma_mult: args.sigma_mult,
        noise_seed: args.seed,
        window: args.window,
        top_k: args.k,
        kinds,
    };
    if args.substitutes.len() == 1 {
        return Err(CliError::usage("--substitutes needs at least 2 names"));
    }
    let input = load_inputs(&args.inputs)?;
    cfg.validate(input.ckpt.config.n_layers)?;
    let config = json!({
        "inputs": input.hashes,
        "trace": to_json(&cfg),
        "substitutes": args.substitutes,
    });
    let mut dir = RunDir::create(&args.output.out, "trace", config, args.output.force)?;

    let mut table = String::from("case  relation        p_clean  p_corr");
    for k in &cfg.kinds {
        table.push_str(&format!("  {:<8}", k.as_str()));
    }
    table.push('\n');
    let mut per_record = Vec::new();
    let mut per_relation: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    let mut decoupled = BTreeMap::new();
    let names: Vec<&str> = args.substitutes.iter().map(String::as_str).collect();
    for rec in &input.selected {
        let ti = TraceInput::from_record(rec, &input.vocab)
            .map_err(|e| CliError::from(e).context(format!("case {}", rec.case_id)))?;
        let grid = trace_grid(&input.ckpt, &ti, &cfg)?;
        dir.write(&format!("grids/{}.json", rec.case_id), grid.to_json()?.as_bytes())?;
        dir.write(&format!("grids/{}.csv", rec.case_id), grid.to_csv().as_bytes())?;
        let profile = recall_profile(&input.ckpt, &ti.prompt)?;
        dir.write(&format!("recall/{}.json", rec.case_id), profile.to_json()?.as_bytes())?;
        dir.write(&format!("recall/{}.csv", rec.case_id), profile.to_csv().as_bytes())?;

        let mut top = BTreeMap::new();
        table.push_str(&format!(
            "{:<5} {:<15} {:>7.3}  {:>6.3}",
            rec.case_id, rec.relation, grid.p_clean, grid.p_corr
        ));
        for &kind in &cfg.kinds {
            let layers = top_k_layers(&grid, kind, cfg.top_k)?;
            table.push_str(&format!("  {:<8}", layer_list(&layers)));
            let counts = per_relation
                .entry(rec.relation.clone())
                .or_default()
                .entry(kind.as_str().to_string())
                .or_insert_with(|| vec![0; input.ckpt.config.n_layers]);
            for &l in &layers {
                counts[l] += 1;
            }
            top.insert(kind.as_str().to_string(), layers);
        }
        table.push('\n');
        per_record.push(json!({
            "case_id": rec.case_id,
            "relation": rec.relation,
            "p_clean": grid.p_clean,
            "p_corr": grid.p_corr,
            "top_layers": top,
        }));
        if names.len() >= 2 {
            match decouple(&input.ckpt, &input.vocab, rec, &names, &cfg) {
                Ok(located) => {
                    let located: BTreeMap<&str, Vec<usize>> =
                        located.into_iter().map(|(k, v)| (k.as_str(), v)).collect();
                    decoupled.insert(rec.case_id.to_string(), to_json(&located));
                }
                Err(dem_core::DemError::InvalidInput(m)) => {
                    decoupled.insert(rec.case_id.to_string(), json!({ "skipped": m }));
                }
                Err(e) => return Err(CliError::from(e).context(format!("case {}", rec.case_id))),
            }
        }
    }
    dir.write_json(
        "summary.json",
        &json!({
            "top_k": cfg.top_k,
            "records": per_record,
            "relations": per_relation,
        }),
    )?;
    if names.len() >= 2 {
        dir.write_json("decoupled.json", &decoupled)?;
    }
    table.push_str("\nlayer counts in the top-k, per relation\n");
    for (rel, kinds) in &per_relation {
        for (kind, counts) in kinds {
            table.push_str(&format!("{rel:<15} {kind:<6} {}\n", layer_list(counts)));
        }
    }
    let path = dir.finish()?;
    emit(out, &table)?;
    emit(out, &format!("wrote {}\n", path.display()))
}

pub fn edit(args: &EditArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = EditConfig {
        mode: args.mode,
        k: args.k,
        layers: (!args.layers.is_empty()).then(|| args.layers.clone()),
        mu: args.mu,
        key_position: args.key_position,
        delta: DeltaOptimConfig {
            alpha: args.alpha,
            beta: args.beta,
            steps: args.steps,
            step_size: args.step_size,
            clamp: args.clamp,
            prefixes: args.prefixes,
        },
    };
    if cfg.mode != EditMode::FixedLayer && cfg.layers.is_some() {
        return Err(CliError::usage("--layers only applies to --mode fixed-layer"));
    }
    let input = load_inputs(&args.inputs)?;
    cfg.validate(input.ckpt.config.n_layers)?;
    let config = json!({ "inputs": input.hashes, "edit": to_json(&cfg) });
    let mut dir = RunDir::create(&args.output.out, "edit", config, args.output.force)?;

    let mut cov = CovarianceCache::new(covariance_corpus(&input.records, &input.vocab), cfg.mu);
    let mut current = input.ckpt.clone();
    let mut summary = Vec::new();
    let mut table = String::from("case  layers   host  nll before  nll after\n");
    for rec in &input.selected {
        let ctx = |e: dem_core::DemError| CliError::from(e).context(format!("case {}", rec.case_id));
        let req = EditRequest::from_record(rec, &input.vocab, cfg.delta.prefixes, cfg.key_position)
            .map_err(ctx)?;
        let (next, receipt) = apply_edit(&current, &req, &cfg, &mut cov).map_err(ctx)?;
        dir.write(&format!("receipts/{}.ksrc", rec.case_id), &receipt.to_bytes()?)?;
        let layers = receipt.selection.layers();
        let (first, last) = (
            receipt.deltas.nlls.first().copied().unwrap_or(f64::NAN),
            receipt.deltas.nlls.last().copied().unwrap_or(f64::NAN),
        );
        table.push_str(&format!(
            "{:<5} {:<8} {:>4}  {:>10.4}  {:>9.4}\n",
            rec.case_id,
            layer_list(&layers),
            receipt.deltas.layer,
            first,
            last
        ));
        summary.push(json!({
            "case_id": rec.case_id,
            "layers": layers,
            "host": receipt.deltas.layer,
            "nll_before": first,
            "nll_after": last,
        }));
        current = next;
    }
    dir.write("model.ksck", &current.to_bytes()?)?;
    dir.write("vocab.txt", &vocab_bytes(&input.vocab))?;
    dir.write_json("summary.json", &summary)?;
    let path = dir.finish()?;
    emit(out, &table)?;
    emit(out, &format!("wrote {}\n", path.display()))
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file("--original", &args.original)?;
    require_dir("--receipts", &args.receipts)?;
    let input = load_inputs(&args.inputs)?;
    let original = load_model("--original", &args.original)?;
    let mut receipts = Vec::with_capacity(input.selected.len());
    let mut receipt_hashes = BTreeMap::new();
    for rec in &input.selected {
        let path = args.receipts.join(format!("{}.ksrc", rec.case_id));
        if !path.is_file() {
            return Err(CliError::usage(format!(
                "case {}: no receipt at {}",
                rec.case_id,
                path.display()
            )));
        }
        let receipt = EditReceipt::load(&path)
            .map_err(|e| CliError::usage(format!("case {}: bad receipt {}: {e}", rec.case_id, path.display())))?;
        if receipt.case_id != rec.case_id {
            return Err(CliError::usage(format!(
                "case {}: receipt {} belongs to case {}",
                rec.case_id,
                path.display(),
                receipt.case_id
            )));
        }
        receipt_hashes.insert(rec.case_id.to_string(), file_hash("--receipts", &path)?);
        receipts.push(receipt);
    }
    let cfg = EvalConfig {
        max_new: args.max_new,
    };
    let config = json!({
        "inputs": input.hashes,
        "original": file_hash("--original", &args.original)?,
        "receipts": receipt_hashes,
        "eval": to_json(&cfg),
    });
    let mut dir = RunDir::create(&args.output.out, "eval", config, args.output.force)?;
    let report = evaluate(&input.ckpt, &original, &input.vocab, &input.selected, &receipts, &cfg)?;
    dir.write("report.json", report.to_json()?.as_bytes())?;
    dir.write("report.csv", report.to_csv().as_bytes())?;
    let path = dir.finish()?;
    let mut table = String::from("metric          value\n");
    for (name, v) in [
        ("efficacy", report.efficacy),
        ("generalization", report.generalization),
        ("specificity", report.specificity),
        ("commonsense", report.commonsense),
        ("consistency", report.consistency),
        ("fluency", report.fluency),
        ("score", report.score),
    ] {
        table.push_str(&format!("{name:<15} {v:.4}\n"));
    }
    emit(out, &table)?;
    emit(out, &format!("wrote {}\n", path.display()))
}

pub fn dataset_validate(args: &DatasetArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file("--data", &args.data)?;
    let records = if args.normalize {
        load_records_normalized(&args.data)
    } else {
        load_records(&args.data)
    }
    .map_err(|e| CliError::from(e).context(format!("--data {}", args.data.display())))?;
    let mut by_relation: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *by_relation.entry(r.relation.as_str()).or_default() += 1;
    }
    let mut table = format!("{} records valid\n\nrelation        records\n", records.len());
    for (rel, n) in by_relation {
        table.push_str(&format!("{rel:<15} {n:>7}\n"));
    }
    emit(out, &table)
}

pub fn toy_init(args: &ToyInitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = ToySuiteConfig::default().with_seed(args.seed);
    cfg.n_records = args.records;
    cfg.train.steps = args.steps;
    let mut dir = RunDir::create(&args.output.out, "toy-init", to_json(&cfg), args.output.force)?;
    let suite = build_toy_suite(&cfg)?;
    dir.write("model.ksck", &suite.checkpoint.to_bytes()?)?;
    dir.write("vocab.txt", &vocab_bytes(&suite.vocab))?;
    dir.write("records.jsonl", records_to_jsonl(&suite.records)?.as_bytes())?;
    dir.write_json(
        "training.json",
        &json!({ "final_nll": suite.final_nll, "losses": suite.report.losses }),
    )?;
    let path = dir.finish()?;
    emit(
        out,
        &format!(
            "toy suite: {} records, {} sequences, {} steps, final nll {:.5}\nwrote {}\n",
            suite.records.len(),
            suite.sequences.len(),
            cfg.train.steps,
            suite.final_nll,
            path.display()
        ),
    )
}
