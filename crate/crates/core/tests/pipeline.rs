//! Harness-level behavior: run directories, ledgers, method wiring and the CLI.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;
use std::process::Command;

use tsr_lab::curation::{read_pairs_jsonl, PairRecord};
use tsr_lab::diagnostics::{read_metrics_csv, METRIC_COLUMNS};
use tsr_lab::harness::{self, ExperimentConfig, Method, DYNAMICS_COLUMNS};
use tsr_lab::policy::{PolicySnapshot, Role};
use tsr_lab::LabError;

fn config(method: Method, iterations: usize, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        method,
        iterations: Some(iterations),
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn pairs(path: &Path) -> Vec<PairRecord> {
    read_pairs_jsonl(BufReader::new(File::open(path).unwrap())).unwrap()
}

fn snapshot(path: &Path) -> PolicySnapshot {
    PolicySnapshot::from_snapshot_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn tsr_run_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let log = harness::run_experiment(&config(Method::Tsr, 2, dir.path())).unwrap();
    for f in [
        "config.toml",
        "run.jsonl",
        "metrics.csv",
        "snapshots/m0.snap",
        "snapshots/mf0.snap",
        "snapshots/m2.snap",
        "datasets/iter0_d1.jsonl",
        "datasets/iter1_d2.jsonl",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let header = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRIC_COLUMNS.join(","));
    let rows = read_metrics_csv(File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows, log.rows);
    assert_eq!(rows.len(), 3);
    assert_eq!(log.ledger.dpo_runs, 4);
    assert_eq!(log.ledger.sft_runs, 1);
    assert!(log.failure.is_none());

    let back = ExperimentConfig::from_file(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back.method, Method::Tsr);
}

#[test]
fn one_tsr_iteration_costs_two_runs_and_three_k_generations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Method::Tsr, 1, dir.path());
    let log = harness::run_experiment(&cfg).unwrap();
    let prompts = cfg.world.partition_size as u64;
    assert_eq!(log.ledger.dpo_runs, 2);
    assert_eq!(log.ledger.generations, 3 * cfg.k as u64 * prompts);

    let d1 = pairs(&dir.path().join("datasets/iter0_d1.jsonl"));
    let d2 = pairs(&dir.path().join("datasets/iter0_d2.jsonl"));
    // Phase 2 only ever swaps the chosen side.
    for b in &d2 {
        let a = d1.iter().find(|a| a.prompt_id == b.prompt_id).expect("d2 prompt has a d1 pair");
        assert_eq!(a.rejected, b.rejected);
        assert_eq!(a.rejected_source, b.rejected_source);
        assert!(matches!(b.chosen_source, Role::Current | Role::Future));
    }
}

#[test]
fn no_future_arm_is_tsr_without_phase_two() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run_experiment(&config(Method::Tsr, 1, a.path())).unwrap();
    let nf = harness::run_experiment(&config(Method::TsrNoFuture, 1, b.path())).unwrap();
    assert_eq!(nf.ledger.dpo_runs, 1);
    assert_eq!(
        fs::read(a.path().join("datasets/iter0_d1.jsonl")).unwrap(),
        fs::read(b.path().join("datasets/iter0_d1.jsonl")).unwrap()
    );
    // M_1 of the ablation is exactly the future model TSR trains and discards.
    let mf = snapshot(&a.path().join("snapshots/mf0.snap"));
    let m1 = snapshot(&b.path().join("snapshots/m1.snap"));
    assert_eq!(mf.params(), m1.params());
}

#[test]
fn every_iteration_curates_its_own_partition() {
    let dir = tempfile::tempdir().unwrap();
    harness::run_experiment(&config(Method::Sr, 4, dir.path())).unwrap();
    let mut seen = BTreeSet::new();
    for i in 0..4 {
        for p in pairs(&dir.path().join(format!("datasets/iter{i}_pairs.jsonl"))) {
            assert_eq!(p.iteration, i);
            assert!(seen.insert(p.prompt_id), "prompt {} curated twice", p.prompt_id);
        }
    }
}

#[test]
fn sft_only_reports_just_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let log = harness::run_experiment(&config(Method::SftOnly, 0, dir.path())).unwrap();
    assert_eq!(log.rows.len(), 1);
    assert_eq!(log.ledger.dpo_runs, 0);
}

#[test]
fn zero_budget_comparison_shares_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cmp = harness::compare_methods(
        &ExperimentConfig::default(),
        &[Method::Sr, Method::Tsr, Method::Spin],
        &[5],
        0,
        dir.path(),
    )
    .unwrap();
    let q: Vec<f64> = cmp.summary.iter().map(|r| r.final_true_quality).collect();
    assert!(q.iter().all(|v| *v == q[0]));
    assert!(cmp.summary.iter().all(|r| r.iterations == 0 && r.dpo_runs == 0));
}

#[test]
fn baselines_run_and_stay_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cmp = harness::compare_methods(
        &ExperimentConfig::default(),
        &[Method::Spin, Method::SpinFair, Method::RejectionSft],
        &[0],
        2,
        dir.path(),
    )
    .unwrap();
    for r in &cmp.summary {
        assert!(r.dpo_runs <= 2, "{} spent {}", r.method, r.dpo_runs);
        assert_eq!(r.iterations, 2);
    }
    assert!(dir.path().join("rejection_sft/seed-0/datasets/iter1_demos.jsonl").is_file());
    let text = fs::read_to_string(dir.path().join("dynamics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), DYNAMICS_COLUMNS.join(","));
}

#[test]
fn bad_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Method::Tsr, 1, dir.path());
    cfg.budget = 1;
    assert!(matches!(harness::run_experiment(&cfg), Err(LabError::Config(_))));
    assert!(ExperimentConfig::from_toml_str("method = \"dpo\"").is_err());
    assert!(ExperimentConfig::from_toml_str("unknown_key = 1").is_err());
}

#[test]
fn export_rejects_logs_without_rows() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("run.jsonl");
    fs::write(&bad, "{\"event\":\"nonsense\"}\n").unwrap();
    assert!(harness::export_figure_data(&[bad]).is_err());
    assert!(harness::export_figure_data(&[]).is_err());
}

fn tsr_lab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tsr-lab")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let ok = tsr_lab(&["verify", "--cases", "50"]);
    assert!(ok.status.success());
    let text = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 4, "{text}");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let bad = tsr_lab(&["run", "--method", "tsr", "--budget", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));

    let unknown = tsr_lab(&["run", "--method", "bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn cli_verify_writes_bound_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsr_lab(&["verify", "--cases", "30", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("bound_check.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lhs,delta_h_norm,estimated_C,satisfied"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|l| l.ends_with(",true")));
}

#[test]
fn cli_run_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = tsr_lab(&["run", "--method", "sr", "--iterations", "2", "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("dynamics.csv");
    let ex = tsr_lab(&["export", run.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(ex.status.success());
    let text = fs::read_to_string(csv).unwrap();
    // score gap and latent cosine for iterations 0 and 1.
    assert!(text.lines().any(|l| l.starts_with("sr,1,latent_cosine,")), "{text}");
}
