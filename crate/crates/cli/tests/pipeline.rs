mod common;

use common::{run_smoke, smp, snapshot};
use smp_core::checkpoint::ArtifactManifest;
use smp_core::eval::BenchComparison;
use smp_core::pruner::GateFile;

#[test]
fn smoke_pipeline_emits_every_manifest() {
    let root = tempfile::tempdir().unwrap();
    run_smoke(root.path()).unwrap();
    let runs = root.path().join("runs");
    for dir in ["data", "encoder", "scorer", "gates", "finetune"] {
        assert!(runs.join(dir).join("config.json").exists(), "{dir}");
    }
    assert_eq!(ArtifactManifest::read(&runs.join("encoder")).unwrap().kind, "encoder");
    assert_eq!(ArtifactManifest::read(&runs.join("scorer")).unwrap().kind, "scorer-run");
    assert_eq!(ArtifactManifest::read(&runs.join("scorer/best")).unwrap().kind, "scorer");
    assert_eq!(ArtifactManifest::read(&runs.join("finetune/same-topic-s1")).unwrap().kind, "classifier");
    let report = std::fs::read_to_string(runs.join("finetune/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().nth(1).unwrap().starts_with("smp,0.5,same-topic,1,accuracy,"));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs.join("finetune/config.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "finetune");
    assert_eq!(resolved["encoder"]["layers"], 2);
}

#[test]
fn prune_reads_the_recorded_best_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    run_smoke(root.path()).unwrap();
    let runs = root.path().join("runs");
    let gates = GateFile::load(&runs.join("gates/gates.json")).unwrap();
    assert_eq!(gates.source_checkpoint, "runs/scorer/best");
    assert_eq!(gates.method, "smp");
    assert_eq!(gates.gates.iter().map(|r| r.iter().sum::<f64>()).collect::<Vec<_>>(), vec![2.0, 2.0]);

    let mut run = ArtifactManifest::read(&runs.join("scorer")).unwrap();
    run.extra["best_checkpoint"] = "last".into();
    run.write(&runs.join("scorer")).unwrap();
    assert_eq!(smp(root.path(), "prune", &["--force"]).0, 0);
    assert_eq!(GateFile::load(&runs.join("gates/gates.json")).unwrap().source_checkpoint, "runs/scorer/last");

    run.extra = serde_json::Value::Null;
    run.write(&runs.join("scorer")).unwrap();
    assert_eq!(smp(root.path(), "prune", &["--force"]).0, 2);
}

#[test]
fn zero_ratio_prune_then_bench_has_zero_deltas() {
    let root = tempfile::tempdir().unwrap();
    for c in ["gen-data", "pretrain", "train-smp"] {
        assert_eq!(smp(root.path(), c, &[]).0, 0, "{c}");
    }
    assert_eq!(smp(root.path(), "prune", &["--ratio", "0"]).0, 0);
    assert_eq!(smp(root.path(), "bench", &[]).0, 0);
    let text = std::fs::read_to_string(root.path().join("runs/bench/bench.json")).unwrap();
    let cmp: BenchComparison = serde_json::from_str(&text).unwrap();
    assert_eq!((cmp.ips_delta, cmp.memory_delta, cmp.attention_flops_delta), (0.0, 0.0, 0.0));
}

#[test]
fn outputs_are_never_overwritten_without_force() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(smp(root.path(), "gen-data", &[]).0, 0);
    let before = snapshot(root.path());
    let (code, err) = smp(root.path(), "gen-data", &["--seed", "7"]);
    assert_eq!(code, 2);
    assert!(err.contains("--force"), "{err}");
    assert_eq!(snapshot(root.path()), before);
    assert_eq!(smp(root.path(), "gen-data", &["--seed", "7", "--force"]).0, 0);
    assert_ne!(snapshot(root.path()), before);
}

#[test]
fn out_flag_redirects_the_command_output() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(smp(root.path(), "gen-data", &["--out", "elsewhere"]).0, 0);
    assert!(root.path().join("elsewhere/tasks/tasks.json").exists());
    assert!(!root.path().join("runs").exists());
}

#[test]
fn exit_codes_distinguish_usage_from_runtime_failures() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(smp(root.path(), "prune", &["--frobnicate"]).0, 1);
    assert_eq!(smp(root.path(), "prune", &["--ratio", "1.5"]).0, 1);
    assert_eq!(smp(root.path(), "prune", &["--precision", "f16"]).0, 1);
    // Nothing to prune yet: a runtime failure.
    assert_eq!(smp(root.path(), "prune", &[]).0, 2);
    let bad = root.path().join("bad.json");
    std::fs::write(&bad, r#"{"unknown": true}"#).unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_smp"))
        .current_dir(root.path())
        .args(["gen-data", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let help = std::process::Command::new(env!("CARGO_BIN_EXE_smp")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn all_pruning_methods_and_sweeps_run_in_both_precisions() {
    let root = tempfile::tempdir().unwrap();
    for c in ["gen-data", "pretrain", "train-smp"] {
        assert_eq!(smp(root.path(), c, &[]).0, 0, "{c}");
    }
    assert_eq!(smp(root.path(), "prune", &["--precision", "f64"]).0, 0);
    for c in ["eval-sim", "sweep-ratio", "viz"] {
        let (code, err) = smp(root.path(), c, &[]);
        assert_eq!(code, 0, "{c}: {err}");
    }
    let sweep = std::fs::read_to_string(root.path().join("runs/sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(root.path().join("runs/viz/l1_h3.pgm").exists());
    let eval = std::fs::read_to_string(root.path().join("runs/eval/report.csv")).unwrap();
    assert!(eval.lines().nth(1).unwrap().contains(",relatedness,1,pearson,"));
}
