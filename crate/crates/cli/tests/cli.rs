use std::path::Path;
use std::process::{Command, Output};

use p2g_core::harness::{read_decisions, read_report, RunConfig};

fn p2g(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2g"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.pretrain.steps = 4;
    c.pretrain.warmup_steps = 1;
    c.pretrain.batch_size = 8;
    c.pretrain_data.pairs = 32;
    c.train.epochs_per_task = 2;
    c.train.batch_size = 8;
    c.domains.truncate(2);
    for d in &mut c.domains {
        d.n_train = 16;
        d.n_test = 8;
    }
    c
}

#[test]
fn print_config_is_the_default() {
    let out = p2g(&["print-config"]);
    assert!(out.status.success());
    let parsed = RunConfig::from_toml_str(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(parsed, RunConfig::default());
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, tiny_config().to_toml().unwrap()).unwrap();
    let enc = dir.path().join("enc");
    let run = dir.path().join("run");

    let out = p2g(&["pretrain", "--config", s(&cfg), "--out", s(&enc)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(enc.join("pretrain.json").exists());

    let out = p2g(&["train", "--config", s(&cfg), "--encoder", s(&enc), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(&run).unwrap();
    assert_eq!(report.tasks, 2);
    assert_eq!(report.matrix.rows.len(), 2);

    let out = p2g(&["eval", "--run", s(&run), "--dump-scores"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["aa"].as_f64().unwrap(), report.metrics.aa);
    assert_eq!(read_decisions(&run.join("scores.jsonl")).unwrap().len(), 16);

    let out = p2g(&["report", "--run", s(&run), "--format", "csv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("tasks,aa,af,af_defined,taa"));
    assert!(text.contains("after_task,task_1,task_2"));

    let data = dir.path().join("data");
    let out = p2g(&["export-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(out.status.success());
    assert!(data.join("domain_1").exists());

    let abl = dir.path().join("ablation");
    let out = p2g(&["ablate", "--config", s(&cfg), "--encoder", s(&enc), "--out", s(&abl)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_field = 1\n").unwrap();
    let out = p2g(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let mut invalid = RunConfig::default();
    invalid.train.top_c = 99;
    std::fs::write(&bad, invalid.to_toml().unwrap()).unwrap();
    let out = p2g(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = p2g(&["eval", "--run", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(2));

    // A readable configuration with nothing else in the run directory.
    let run = dir.path().join("run");
    std::fs::create_dir(&run).unwrap();
    std::fs::write(run.join("config.toml"), RunConfig::default().to_toml().unwrap()).unwrap();
    let out = p2g(&["eval", "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(3));

    let out = p2g(&["train"]);
    assert_eq!(out.status.code(), Some(2));
}
