use std::path::Path;
use std::process::{Command, Output};

fn lpx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lpx"))
        .args(args)
        .env_remove("LPX_WORKERS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let o = lpx(&["generate", "--dim", "16", "--angle-step", "2,1", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["d16_step2.0", "d16_step1.0"] {
        for f in ["dataset.lpx", "dataset.csv", "dataset.json"] {
            assert!(dir.path().join(name).join(f).is_file(), "{name}/{f}");
        }
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("d16_step2.0/dataset.json")).unwrap()).unwrap();
    assert_eq!(meta["images"], 140);
}

#[test]
fn invalid_size_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = lpx(&["generate", "--dim", "15", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
    assert!(!out.exists());

    let o = lpx(&["sweep", "--dim", "16", "--angle-step", "0.7", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    let o = lpx(&["attack", "--dim", "16", "--mode", "sideways", "--out", s(&out)]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn bad_worker_env_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lpx"))
        .args(["generate", "--dim", "16", "--angle-step", "2", "--out", s(dir.path())])
        .env("LPX_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let out = dir.path().join("grid");
    std::fs::write(
        &cfg,
        serde_json::json!({ "dims": [32], "angle_steps": [2.0], "out": s(&out) }).to_string(),
    )
    .unwrap();
    let o = lpx(&["generate", "--config", s(&cfg), "--dim", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("d16_step2.0/dataset.lpx").is_file());
    assert!(!out.join("d32_step2.0").exists());

    std::fs::write(&cfg, r#"{"dims":[16],"angle_stepz":[2.0]}"#).unwrap();
    assert_eq!(code(&lpx(&["generate", "--config", s(&cfg)])), 3);
}

#[test]
fn attack_without_models_is_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--dim", "16", "--angle-step", "2", "--models", "1", "--out", s(dir.path())];
    assert_eq!(code(&lpx(&[&["generate"][..], &base].concat())), 0);
    let o = lpx(&[&["attack"][..], &base].concat());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAILED"));
}

#[test]
fn gradcheck_exit_codes() {
    let o = lpx(&["gradcheck", "--samples", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("conv2_w") && text.contains(": ok"));

    // an impossible tolerance fails without erroring
    assert_eq!(code(&lpx(&["gradcheck", "--samples", "5", "--tolerance", "1e-30"])), 2);
    assert_eq!(code(&lpx(&["gradcheck", "--dim", "17"])), 3);
}
