use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_eventsched");

fn shipped_config() -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/two_process.toml");
    fs::read_to_string(root).unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, shipped_config()).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "42",
            "--runs",
            "3",
            "--horizon",
            "50",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(out.join("trace_greedy.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("episode,step,sensor,trace_p,sq_error,transmitted")
    );
    assert_eq!(lines.count(), 3 * 50 * 2);
}

#[test]
fn dare_rejects_undetectable_system() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[[systems]]\na = [[2.0]]\nc = [[0.0]]\nq = [[1.0]]\nr = [[1.0]]\n",
    )
    .unwrap();
    let o = run(&["dare", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("detectable") && err.contains("systems[0]"),
        "{err}"
    );
}

#[test]
fn malformed_config_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        shipped_config().replace("runs = 500", "runs = \"many\""),
    )
    .unwrap();
    let o = run(&["dare", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("runs"), "{err}");
}

#[test]
fn trained_policy_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, shipped_config().replace("levels = 32", "levels = 8")).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "mdp-train",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("average cost"), "{stdout}");
    assert!(out.join("mdp_policy.json").exists());
    let o = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "--scheduler",
        "mdp",
        "--runs",
        "2",
        "--horizon",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("summary_mdp.json").exists());
}
