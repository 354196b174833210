use std::collections::BTreeMap;
use std::path::Path;

use lpx_core::attack::AttackMode;
use lpx_core::fsutil::sha256_hex;
use lpx_core::sweep::{run_stages, run_sweep, ExperimentConfig, Stages, SweepStatus};
use lpx_core::Error;

fn small(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dims: vec![16],
        angle_steps: vec![2.0],
        models_per_config: 5,
        cross_check_max_dim: 16,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

/// Relative path -> sha256 of every file under `root`.
fn tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

#[test]
fn sweep_writes_expected_tree_and_resumes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let report = run_sweep(&cfg).unwrap();
    assert_eq!(report.status, SweepStatus::Success);
    assert_eq!(report.status.exit_code(), 0);
    assert_eq!(report.convergence.runs, 5);
    assert!(report.redundancy.is_none());

    let c = report.config(16, 2.0).unwrap();
    assert_eq!(c.n_images, 140);
    assert_eq!(c.models.len(), 5);
    for m in &c.models {
        let a = m.attack.as_ref().unwrap();
        assert_eq!(a.mode, AttackMode::Full);
        assert_eq!(a.candidates_total, 140 * 256);
        let x = a.cross_check.as_ref().unwrap();
        assert_eq!(x.mode, AttackMode::IncrementalVerified);
        assert!(x.identical);
        assert_eq!(x.records_sha256, a.records_sha256);
    }

    let files = tree(dir.path());
    let names: Vec<&str> = files.keys().map(String::as_str).collect();
    for want in [
        "report.json",
        "timings.json",
        "manifest.json",
        "d16_step2.0/dataset.lpx",
        "d16_step2.0/dataset.csv",
        "d16_step2.0/dataset.json",
        "d16_step2.0/models/seed1.lpxm",
        "d16_step2.0/models/seed5.json",
        "d16_step2.0/attacks/seed3.csv",
        "d16_step2.0/attacks/seed3.summary.json",
        "d16_step2.0/attacks/seed3.incremental_verified.csv",
        "d16_step2.0/analysis/angle_profile.csv",
        "d16_step2.0/analysis/heatmap.csv",
        "d16_step2.0/analysis/heatmap.pgm",
        "d16_step2.0/analysis/markers.csv",
        "d16_step2.0/analysis/summary.json",
    ] {
        assert!(names.contains(&want), "missing {want}; have {names:?}");
    }

    let manifest: lpx_core::trainer::ProtocolManifest =
        lpx_core::fsutil::read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.summary.runs, 5);
    assert!(manifest.all_converged());
    for r in &manifest.runs {
        assert!(dir.path().join(&r.checkpoint_path).is_file(), "{}", r.checkpoint_path);
    }

    let again = run_sweep(&cfg).unwrap();
    assert_eq!(again.status, SweepStatus::Success);
    let mut after = tree(dir.path());
    let mut before = files;
    after.remove("timings.json");
    before.remove("timings.json");
    assert_eq!(before, after);
}

#[test]
fn attack_without_models_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        models_per_config: 2,
        ..small(dir.path())
    };
    let (report, _) = run_stages(&cfg, Stages::GENERATE).unwrap();
    assert!(report.failures.is_empty());
    assert!(dir.path().join("d16_step2.0/dataset.lpx").exists());
    let (report, _) = run_stages(&cfg, Stages::ATTACK).unwrap();
    assert_eq!(report.status, SweepStatus::PartialFailure);
    assert_eq!(report.status.exit_code(), 2);
    assert!(!report.failures.is_empty());
}

#[test]
fn invalid_configurations_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for cfg in [
        ExperimentConfig { dims: vec![17], ..small(&out) },
        ExperimentConfig { angle_steps: vec![0.7], ..small(&out) },
        ExperimentConfig { dims: vec![], ..small(&out) },
        ExperimentConfig { models_per_config: 0, ..small(&out) },
        ExperimentConfig { workers: Some(0), ..small(&out) },
    ] {
        assert!(matches!(run_sweep(&cfg), Err(Error::InvalidConfig(_))));
    }
    assert!(!out.exists());
}

#[test]
fn config_parsing_and_hash() {
    let a: ExperimentConfig = serde_json::from_str(r#"{"dims":[16],"angle_steps":[2.0],"out":"x"}"#).unwrap();
    let b: ExperimentConfig = serde_json::from_str(r#"{"dims":[16],"angle_steps":[2.0],"out":"y","workers":3}"#).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.models_per_config, 5);
    assert_eq!(a.mode_for(16), AttackMode::Full);
    assert_eq!(a.mode_for(64), AttackMode::IncrementalVerified);
    let c = ExperimentConfig { base_seed: 9, ..a.clone() };
    assert_ne!(a.hash(), c.hash());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dimz":[16]}"#).is_err());
}
