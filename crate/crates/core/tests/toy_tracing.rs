// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::OnceLock;

use dem_core::localization::{
    clean_run, corrupted_run, restore_run, trace_grid, TraceConfig, TraceInput,
};
use dem_core::model::{ActivationSite, SiteKind};
use dem_core::toy::{build_toy_suite, ToySuite, ToySuiteConfig};

fn suite() -> &'static ToySuite {
    static SUITE: OnceLock<ToySuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let mut cfg = ToySuiteConfig::default().with_seed(4);
        cfg.n_records = 12;
        cfg.train.steps = 300;
        build_toy_suite(&cfg).unwrap()
    })
}

/// Inputs whose known answer the model reproduces.
fn memorized() -> Vec<TraceInput> {
    let s = suite();
    s.records
        .iter()
        .map(|r| TraceInput::from_record(r, &s.vocab).unwrap())
        .filter(|ti| clean_run(&s.checkpoint, ti).unwrap().decoded == ti.target)
        .collect()
}

#[test]
fn memorized_records_score_one() {
    let inputs = memorized();
    assert!(inputs.len() >= 10, "only {} of 12 memorized", inputs.len());
    for ti in &inputs {
        let a = clean_run(&suite().checkpoint, ti).unwrap();
        let b = clean_run(&suite().checkpoint, ti).unwrap();
        assert_eq!(a.score, 1.0);
        assert_eq!(a.tape.logits, b.tape.logits);
    }
}

#[test]
fn noise_never_beats_the_clean_run() {
    let ckpt = &suite().checkpoint;
    let ti = &memorized()[0];
    let p_clean = clean_run(ckpt, ti).unwrap().score;
    let below = (0..100)
        .filter(|&seed| {
            let cfg = TraceConfig {
                noise_seed: seed,
                ..TraceConfig::default()
            };
            corrupted_run(ckpt, ti, &cfg).unwrap() <= p_clean
        })
        .count();
    assert!(below >= 95, "{below}/100");
    let cfg = TraceConfig::default();
    assert_eq!(corrupted_run(ckpt, ti, &cfg).unwrap(), corrupted_run(ckpt, ti, &cfg).unwrap());
}

#[test]
fn restoration_recovers_the_answer() {
    let ckpt = &suite().checkpoint;
    let cfg = TraceConfig::default();
    for ti in memorized().iter().take(4) {
        let clean = clean_run(ckpt, ti).unwrap();
        let all: Vec<ActivationSite> = (0..ti.prompt.len())
            .flat_map(|t| (0..ckpt.config.n_layers).map(move |l| ActivationSite::new(l, SiteKind::Block, t)))
            .collect();
        assert_eq!(restore_run(ckpt, ti, &clean, &cfg, &all).unwrap(), clean.score);

        let grid = trace_grid(ckpt, ti, &cfg).unwrap();
        let best = grid.scores.iter().flatten().flatten().fold(f64::MIN, |a, &b| a.max(b));
        assert!(best >= grid.p_corr, "case {}: best {best}, corrupted {}", ti.case_id, grid.p_corr);
    }
}
