mod common;

use std::io::Write;

use snapdiff::canary::{
    run_experiment, CanarySpec, ExperimentConfig, Pattern, ScheduleChoice, SearchSettings, Training, Workbench,
    SUMMARY_COLUMNS,
};
use snapdiff::{differential_score, relative_differential_score};

fn excerpt(lines: usize) -> String {
    let text = std::fs::read_to_string(common::data_file("moby_dick.txt")).unwrap();
    text.lines().take(lines).collect::<Vec<_>>().join("\n")
}

fn config(pattern: Pattern, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new("unused", CanarySpec::new(pattern, seed), 1000);
    c.vocab_size = 1500;
    c.orig_share = 0.5;
    c.extra_fractions = vec![0.0, 0.5];
    c.scenarios = vec![Training::Retrain, Training::FinetuneProxy { lambda: 0.5 }];
    c.random_phrases = 200;
    c.seed = seed;
    c
}

fn with_search(mut c: ExperimentConfig) -> ExperimentConfig {
    c.search = Some(SearchSettings {
        schedule: ScheduleChoice::Halving,
        width: Some(256),
        floor: 16,
        groups: 2,
        top: 5,
        ..SearchSettings::default()
    });
    c
}

#[test]
fn identical_configs_give_identical_reports() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(excerpt(1200).as_bytes()).unwrap();
    let mut c = with_search(config(Pattern::AllLow, 4));
    c.corpus = file.path().to_path_buf();
    let a = serde_json::to_string(&run_experiment(&c).unwrap()).unwrap();
    let b = serde_json::to_string(&run_experiment(&c).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn recorded_scores_are_recomputable() {
    let text = excerpt(1500);
    let c = config(Pattern::Mixed, 2);
    let bench = Workbench::prepare(&c, &text).unwrap();
    let report = bench.run(&c).unwrap();
    assert_eq!(report.scenarios.len(), 4);
    for s in &report.scenarios {
        let pair = bench.snapshots(&c, s.extra_fraction, s.training).unwrap();
        assert_eq!(pair.canary, report.canary.ids);
        let ds = differential_score(&*pair.base, &*pair.updated, &pair.canary).unwrap().score;
        let rel = relative_differential_score(&*pair.base, &*pair.updated, &pair.canary, 1e-7).unwrap().score;
        assert!((ds - s.ds).abs() <= 1e-12);
        assert!((rel - s.ds_rel).abs() <= 1e-12);
        let curve: f64 = s.prefix_curve.iter().map(|p| p.token_diff).sum();
        assert!((curve - s.ds).abs() <= 1e-12);
        assert_eq!(s.rank_kind, "not_searched");
    }
}

#[test]
fn generated_canaries_follow_their_pattern() {
    let text = excerpt(1500);
    for pattern in [Pattern::AllLow, Pattern::Mixed, Pattern::LowToHigh, Pattern::HighToLow] {
        let c = config(pattern, 9);
        let report = Workbench::prepare(&c, &text).unwrap().run(&c).unwrap();
        assert!(pattern.accepts(&report.canary.quintiles), "{:?}", report.canary);
    }
}

#[test]
fn score_grows_with_insertions() {
    let text = excerpt(1500);
    let mut c = config(Pattern::AllLow, 1);
    c.extra_fractions = vec![0.0];
    c.scenarios = vec![Training::Retrain];
    let bench = Workbench::prepare(&c, &text).unwrap();
    let mut last = f64::NEG_INFINITY;
    for k in [1, 10, 100] {
        c.insertions_override = Some(k);
        let ds = bench.run(&c).unwrap().scenarios[0].ds;
        assert!(ds >= last, "k={k}: {ds} < {last}");
        last = ds;
    }
}

#[test]
fn search_finds_a_frequent_canary() {
    let text = excerpt(1500);
    let mut c = with_search(config(Pattern::AllLow, 3));
    c.extra_fractions = vec![0.0];
    c.scenarios = vec![Training::Retrain];
    c.insertion_rate = 300;
    let report = Workbench::prepare(&c, &text).unwrap().run(&c).unwrap();
    let s = &report.scenarios[0];
    assert_eq!(s.rank.map(|r| r.value), Some(0), "{}", report.canary.text);
    assert_eq!(s.extracted[0].phrases[0].text, report.canary.text);
    assert!(s.ds > s.random_baseline.unwrap().max);
}

#[test]
fn summary_csv_has_one_row_per_scenario() {
    let text = excerpt(800);
    let c = config(Pattern::AllLow, 0);
    let report = Workbench::prepare(&c, &text).unwrap().run(&c).unwrap();
    let mut out = Vec::new();
    report.write_summary_csv(&mut out).unwrap();
    let out = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], SUMMARY_COLUMNS.join(","));
    assert_eq!(lines.len(), 1 + report.scenarios.len());
    assert!(lines[1].starts_with("retrain@0,all_low,1000,"));
}

#[test]
fn invalid_configs_are_rejected() {
    let text = excerpt(300);
    let mut c = config(Pattern::AllLow, 0);
    c.scenarios = vec![Training::FinetuneProxy { lambda: 1.5 }];
    assert!(Workbench::prepare(&c, &text).is_err());
    let mut c = config(Pattern::HighToLow, 0);
    c.canary.length = 4;
    assert!(Workbench::prepare(&c, &text).is_err());
    let mut c = config(Pattern::AllLow, 0);
    c.extra_fractions = vec![5.0];
    let bench = Workbench::prepare(&c, &text).unwrap();
    assert!(bench.run(&c).is_err());
}

#[test]
fn later_canary_tokens_gain_more() {
    let text = excerpt(1500);
    let mut c = config(Pattern::AllLow, 6);
    c.extra_fractions = vec![0.0];
    c.scenarios = vec![Training::Retrain];
    let bench = Workbench::prepare(&c, &text).unwrap();
    let report = bench.run(&c).unwrap();
    let curve = &report.scenarios[0].prefix_curve;
    assert_eq!(curve.len(), 5);
    assert!(curve[1..].iter().all(|p| p.token_diff > curve[0].token_diff), "{curve:?}");
    let base = bench.base();
    let flat = snapdiff::canary::prefix_curve(&**base, &**base, &report.canary.ids).unwrap();
    assert!(flat.iter().all(|p| p.token_diff == 0.0));
}
