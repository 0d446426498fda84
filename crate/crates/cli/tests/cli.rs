// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use dem_core::editor::{revert_edit, EditReceipt};
use dem_core::model::Checkpoint;

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Outcome {
    /// The run directory reported on the last stdout line.
    fn run_dir(&self) -> PathBuf {
        let line = self
            .stdout
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("wrote "))
            .unwrap_or_else(|| panic!("no run dir in output:\n{}", self.stdout));
        PathBuf::from(line)
    }
}

fn dem(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["dem"];
    full.extend_from_slice(args);
    let code = dem_cli::run(full, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A small, briefly trained toy shared by the tests.
fn toy() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let base = scratch("toy");
        let r = dem(&["toy-init", "--out", s(&base), "--records", "8", "--steps", "60", "--seed", "3"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        r.run_dir()
    })
}

fn model() -> String {
    toy().join("model.ksck").display().to_string()
}

fn data() -> String {
    toy().join("records.jsonl").display().to_string()
}

fn run_edit(out: &Path, cases: &str) -> PathBuf {
    let r = dem(&[
        "edit", "--model", &model(), "--data", &data(), "--cases", cases, "--out", s(out), "--steps", "10",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    r.run_dir()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let r = dem(&["trace", "--model", &model(), "--out", "x"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--data"), "{}", r.stderr);
}

#[test]
fn nonexistent_input_names_the_flag() {
    let out = scratch("nonexistent");
    let r = dem(&["trace", "--model", &model(), "--data", "/no/such/file.jsonl", "--out", s(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--data"), "{}", r.stderr);

    let r = dem(&["edit", "--model", "/no/model.ksck", "--data", &data(), "--out", s(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--model"), "{}", r.stderr);
}

#[test]
fn unknown_mode_and_case_are_rejected() {
    let out = scratch("unknown");
    let r = dem(&["edit", "--model", &model(), "--data", &data(), "--out", s(&out), "--mode", "bogus"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("bogus"), "{}", r.stderr);

    let r = dem(&["edit", "--model", &model(), "--data", &data(), "--out", s(&out), "--cases", "999"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("999"), "{}", r.stderr);

    let r = dem(&[
        "edit", "--model", &model(), "--data", &data(), "--out", s(&out), "--layers", "0,1",
    ]);
    assert_eq!(r.code, 2, "--layers without fixed-layer");
}

#[test]
fn dataset_validate_reports_counts_and_bad_lines() {
    let r = dem(&["dataset-validate", "--data", &data()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("8 records valid"), "{}", r.stdout);

    let dir = scratch("dataset");
    let bad = dir.join("bad.jsonl");
    let first = fs::read_to_string(data()).unwrap().lines().next().unwrap().to_string();
    fs::write(&bad, format!("{first}\n{{\"case_id\": 1}}\n")).unwrap();
    let r = dem(&["dataset-validate", "--data", s(&bad)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);
}

#[test]
fn existing_run_dir_needs_force() {
    let out = scratch("force");
    let args = ["trace", "--model", &model(), "--data", &data(), "--cases", "0", "--out", s(&out)];
    let first = dem(&args);
    assert_eq!(first.code, 0, "{}", first.stderr);
    let again = dem(&args);
    assert_eq!(again.code, 2);
    assert!(again.stderr.contains("--force"), "{}", again.stderr);
    let mut forced = args.to_vec();
    forced.push("--force");
    let r = dem(&forced);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.run_dir(), first.run_dir());
}

#[test]
fn trace_writes_grids_recall_and_summary() {
    let out = scratch("trace");
    let r = dem(&[
        "trace", "--model", &model(), "--data", &data(), "--cases", "0,1", "--out", s(&out),
        "--substitutes", "Alice,Bob",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let dir = r.run_dir();
    for id in [0, 1] {
        for ext in ["json", "csv"] {
            assert!(dir.join(format!("grids/{id}.{ext}")).is_file());
            assert!(dir.join(format!("recall/{id}.{ext}")).is_file());
        }
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"].as_array().unwrap().len(), 2);
    assert!(dir.join("decoupled.json").is_file());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "trace");
    let hash = manifest["artifacts"]["grids/0.csv"].as_str().unwrap();
    assert_eq!(hash, dem_cli::sha256_hex(&fs::read(dir.join("grids/0.csv")).unwrap()));
}

#[test]
fn receipts_revert_to_the_original_bytes() {
    let out = scratch("revert");
    let dir = run_edit(&out, "0,1,2");
    let original = Checkpoint::load(model()).unwrap();
    let mut ckpt = Checkpoint::load(dir.join("model.ksck")).unwrap();
    assert!(!ckpt.bit_identical(&original));
    for id in [2, 1, 0] {
        let receipt = EditReceipt::load(dir.join(format!("receipts/{id}.ksrc"))).unwrap();
        ckpt = revert_edit(&ckpt, &receipt).unwrap();
    }
    assert_eq!(ckpt.to_bytes().unwrap(), fs::read(model()).unwrap());
}

#[test]
fn eval_of_an_unchanged_model_is_perfect_on_locality() {
    let out = scratch("identity");
    let edit_dir = run_edit(&out, "0,1");
    let r = dem(&[
        "eval", "--model", &model(), "--original", &model(), "--data", &data(), "--cases", "0,1",
        "--receipts", s(&edit_dir.join("receipts")), "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(r.run_dir().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["specificity"], 1.0);
    assert_eq!(report["commonsense"], 1.0);
}

#[test]
fn corrupt_or_missing_receipt_names_the_case() {
    let out = scratch("corrupt");
    let edit_dir = run_edit(&out, "0,1");
    let receipts = edit_dir.join("receipts");
    let edited = edit_dir.join("model.ksck");
    let eval = |cases: &str| {
        dem(&[
            "eval", "--model", s(&edited), "--original", &model(), "--data", &data(), "--cases", cases,
            "--receipts", s(&receipts), "--out", s(&out),
        ])
    };
    let r = eval("0,1,2");
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("case 2"), "{}", r.stderr);

    let path = receipts.join("1.ksrc");
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&path, bytes).unwrap();
    let r = eval("0,1");
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("case 1"), "{}", r.stderr);
}

#[test]
fn edit_then_eval_end_to_end() {
    let out = scratch("pipeline");
    let edit_dir = run_edit(&out, "0,1,2,3");
    for name in ["model.ksck", "vocab.txt", "summary.json", "manifest.json"] {
        assert!(edit_dir.join(name).is_file(), "{name}");
    }
    let r = dem(&[
        "eval", "--model", s(&edit_dir.join("model.ksck")), "--original", &model(), "--data", &data(),
        "--cases", "0,1,2,3", "--receipts", s(&edit_dir.join("receipts")), "--out", s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("efficacy"));
    let dir = r.run_dir();
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "header plus one row per case");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    for key in ["efficacy", "generalization", "specificity", "consistency", "commonsense", "fluency", "score"] {
        let v = report[key].as_f64().unwrap();
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }
}
