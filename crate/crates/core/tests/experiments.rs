mod common;

use std::fs;
use std::path::Path;

use cod_core::distill::SoftLabelMode;
use cod_core::experiments::{load_summary, run, sha256_file, Aggregate, ExperimentKind, Manifest, RunSummary};
use common::small_config;

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap()
}

fn csv_column_max(text: &str, column: &str) -> f64 {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let idx = rdr.headers().unwrap().iter().position(|h| h == column).unwrap();
    rdr.records()
        .map(|r| r.unwrap()[idx].parse::<f64>().unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn moons_runs_are_bitwise_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run(&small_config(ExperimentKind::Moons, a.path())).unwrap();
    let sb = run(&small_config(ExperimentKind::Moons, b.path())).unwrap();
    assert_eq!(read(a.path(), "metrics.csv"), read(b.path(), "metrics.csv"));
    assert_eq!(sa.seeds, sb.seeds);
    for rel in &sa.artifacts {
        if rel != "summary.json" {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }
}

#[test]
fn moons_summary_round_trips_and_aggregates_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(&small_config(ExperimentKind::Moons, dir.path())).unwrap();
    assert!(summary.seeds.iter().all(|e| e.error.is_none()));
    let loaded = load_summary(dir.path()).unwrap();
    assert_eq!(summary, loaded);
    assert_eq!(RunSummary::from_json(&summary.to_json().unwrap()).unwrap(), summary);

    let seeds: Vec<u64> = summary.seeds.iter().map(|e| e.seed).collect();
    assert_eq!(seeds, vec![1, 3]);
    for (name, agg) in &summary.aggregates {
        let again = Aggregate::of(&summary.metric_values(name)).unwrap();
        assert_eq!(agg.n, again.n);
        assert!((agg.mean - again.mean).abs() <= 1e-12);
        assert!((agg.median - again.median).abs() <= 1e-12);
    }
    for key in ["hausdorff_standard", "hausdorff_cod", "standard_accuracy", "cod_accuracy", "teacher_accuracy"] {
        assert!(summary.aggregates.contains_key(key), "{key}");
    }
}

#[test]
fn probability_grids_have_one_row_per_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(ExperimentKind::Moons, dir.path());
    run(&cfg).unwrap();
    for model in ["teacher", "standard", "cod"] {
        let text = read(dir.path(), &format!("seed_1/grid_{model}.csv"));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x1,x2,p1"));
        assert_eq!(lines.count(), cfg.geometry.resolution * cfg.geometry.resolution);
    }
}

#[test]
fn disabling_the_counterfactual_arm_leaves_only_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Moons, dir.path());
    cfg.arms.cod = false;
    let summary = run(&cfg).unwrap();
    let names: Vec<&String> = summary.aggregates.keys().collect();
    assert!(names.iter().all(|n| !n.contains("cod") && !n.contains("cfe")), "{names:?}");
    assert!(summary.aggregates.contains_key("hausdorff_standard"));
    assert!(!dir.path().join("seed_1/grid_cod.csv").exists());
}

#[test]
fn manifest_checksums_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(&small_config(ExperimentKind::Fisher, dir.path())).unwrap();
    let manifest: Manifest = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest.config, summary.config);
    let paths: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(paths, summary.artifacts.iter().map(String::as_str).collect::<Vec<_>>());
    for f in &manifest.files {
        let (sha, bytes) = sha256_file(&dir.path().join(&f.path)).unwrap();
        assert_eq!((sha, bytes), (f.sha256.clone(), f.bytes));
    }
}

#[test]
fn fisher_control_without_boundary_samples_has_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Fisher, dir.path());
    cfg.fisher.experiment.cf_fraction = 0.0;
    let summary = run(&cfg).unwrap();
    for e in &summary.seeds {
        assert_eq!(e.metrics["ratio"], 1.0);
        assert_eq!((e.metrics["ci_low"], e.metrics["ci_high"]), (1.0, 1.0));
    }
}

#[test]
fn bound_metrics_agree_with_the_exported_files() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(&small_config(ExperimentKind::Bound, dir.path())).unwrap();
    for e in &summary.seeds {
        assert!(e.error.is_none(), "{:?}", e.error);
        let pairs = read(dir.path(), &format!("seed_{}/pairs.csv", e.seed));
        assert_eq!(e.metrics["alpha"], csv_column_max(&pairs, "perturb_norm"));
        let report: serde_json::Value =
            serde_json::from_str(&read(dir.path(), &format!("seed_{}/bound_cod.json", e.seed))).unwrap();
        assert_eq!(report["alpha"].as_f64().unwrap(), e.metrics["alpha"]);
        assert_eq!(report["epsilon"].as_f64().unwrap(), e.metrics["epsilon"]);
        assert_eq!(e.metrics["bound"], e.metrics["alpha"] + e.metrics["epsilon"]);
        assert_eq!(e.metrics["control_h"], 0.0);
        assert_eq!(e.metrics["control_satisfied"], 1.0);
    }
}

#[test]
fn ablation_lists_every_mode_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Ablation, dir.path());
    cfg.seeds = vec![0];
    cfg.ablation.ks = vec![8, 16, 32];
    cfg.ablation.modes = vec![SoftLabelMode::Teacher, SoftLabelMode::None, SoftLabelMode::Random];
    let summary = run(&cfg).unwrap();
    let cells = summary.seeds[0].reports["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 9);
    for mode in ["teacher", "none", "random"] {
        for k in [8, 16, 32] {
            assert!(summary.seeds[0].metrics.contains_key(&format!("accuracy_{mode}_k{k}")));
        }
    }
}

#[test]
fn a_failing_seed_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Fisher, dir.path());
    cfg.fisher.experiment.max_separation_rate = 0.0;
    cfg.fisher.experiment.k = 6;
    cfg.seeds = vec![0, 1, 2, 3];
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.seeds.len(), 4);
    for e in summary.seeds.iter().filter(|e| e.error.is_some()) {
        assert_eq!(e.error.as_ref().unwrap().kind, "experiment_invalid");
        assert!(e.metrics.is_empty());
    }
    assert!(summary.seeds.iter().any(|e| e.error.is_some()));
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(ExperimentKind::Moons, dir.path());
    cfg.seeds = vec![1, 1];
    assert_eq!(run(&cfg).unwrap_err().kind(), "config");
    cfg.seeds = vec![];
    assert_eq!(run(&cfg).unwrap_err().kind(), "config");
    let mut cfg = small_config(ExperimentKind::Ablation, dir.path());
    cfg.ablation.modes = vec![SoftLabelMode::None];
    cfg.distill.loss_weights.alpha = 1.0;
    assert!(run(&cfg).is_ok());
}
