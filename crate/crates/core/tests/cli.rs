use std::fs;
use std::process::Command;

fn dinl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dinl"))
}

#[test]
fn prune_reports_tree_and_gain() {
    let out = dinl().arg("prune").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("tree edges (8): (0,6) (1,6) (2,7) (3,6) (4,6) (5,7) (6,9) (7,9)"));
    assert!(text.contains("exchange gain G_B: 70.37%"));
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    let text = dinl::config::DEFAULT_CONFIG.replace("epochs = 300", "epochs = 2");
    assert_ne!(text, dinl::config::DEFAULT_CONFIG);
    fs::write(&config, text).unwrap();
    let out_dir = dir.path().join("out");
    let status = dinl()
        .args(["--config", config.to_str().unwrap(), "run", "--seeds", "2"])
        .args(["--schemes", "dense,dijkstra"])
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
    let records = dinl::harness::read_records_csv(&out_dir.join("records.csv")).unwrap();
    assert_eq!(records.len(), 4);
    for name in ["summary.csv", "table1.csv", "frontier.csv"] {
        assert!(out_dir.join(name).exists());
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = dinl()
        .args(["run", "--schemes", "sparse"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("bad.json");
    fs::write(&topo, "{ \"nodes\": [").unwrap();
    let out = dinl()
        .arg("prune")
        .arg("--topology")
        .arg(&topo)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
