//! The `tgad` binary end to end on a small generated graph.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tgad::synthetic::{generate, SyntheticConfig};

fn tgad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgad")).args(args).output().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn fixture(extra: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&SyntheticConfig {
        nodes: 80,
        edges: 600,
        ..SyntheticConfig::time_structured()
    })
    .unwrap();
    let data = dir.path().join("graph.txt");
    let mut text = String::from("% src dst weight t\n");
    for e in g.store.edges() {
        text.push_str(&format!("{} {} 1 {}\n", e.src + 100, e.dst + 100, e.t));
    }
    fs::write(&data, text).unwrap();
    let out = dir.path().join("run");
    let config = dir.path().join("exp.cfg");
    fs::write(
        &config,
        format!(
            "dataset = {}\ninject = true\ninject_k = 2\nlabels = 1\nhidden = 8\nlayers = 1\nheads = 2\n\
             time_dim = 8\nfanouts = 4,2\nepochs = 2\nbatch_size = 60\nlr = 0.001\nparallel = false\nout = {}\n{extra}",
            data.display(),
            out.display()
        ),
    )
    .unwrap();
    Fixture { _dir: dir, config, out }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_then_evaluate_writes_run_directory() {
    let f = fixture("");
    let cfg = f.config.to_str().unwrap();
    let o = tgad(&["train", "--config", cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["config.cfg", "train_log.jsonl", "timing.jsonl", "checkpoint.bin", "labeled_edges.tsv", "node_map.tsv", "clusters.tsv"] {
        assert!(f.out.join(name).exists(), "{name} missing");
    }
    let log = fs::read_to_string(f.out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let labeled = fs::read_to_string(f.out.join("labeled_edges.tsv")).unwrap();
    assert_eq!(labeled.lines().filter(|l| l.ends_with("\t1")).count(), 1);

    let ckpt = f.out.join("checkpoint.bin");
    let o = tgad(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&f.out.join("metrics_test.json"));
    let auc = m["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(m["split"], "test");
    assert!(m["anomalies"].as_u64().unwrap() > 0);
}

#[test]
fn node_map_inverts_remapping() {
    let f = fixture("");
    let o = tgad(&["inject", "--config", f.config.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = fs::read_to_string(f.out.join("node_map.tsv")).unwrap();
    let rows: Vec<(usize, usize)> = map
        .lines()
        .map(|l| {
            let mut it = l.split('\t');
            (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
        })
        .collect();
    assert!(rows.iter().enumerate().all(|(i, &(dense, _))| dense == i));
    assert!(rows.iter().all(|&(_, original)| original >= 100));
    let injected = fs::read_to_string(f.out.join("injected.tsv")).unwrap();
    let anomalies = injected.lines().filter(|l| !l.starts_with('#') && l.split('\t').nth(4) == Some("1")).count();
    let edges = injected.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(anomalies, (0.03 * (edges - anomalies) as f64).round() as usize);
}

#[test]
fn export_rows_have_id_label_and_components() {
    let f = fixture("");
    assert!(tgad(&["train", "--config", f.config.to_str().unwrap()]).status.success());
    let ckpt = f.out.join("checkpoint.bin");
    let path = f.out.join("emb.tsv");
    let o = tgad(&["export-embeddings", "--checkpoint", ckpt.to_str().unwrap(), "--split", "val", "--output", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&path).unwrap();
    assert!(!text.is_empty());
    assert!(text.lines().all(|l| l.split('\t').count() == 8 + 2));
    let first = fs::read(&path).unwrap();
    assert!(tgad(&["export-embeddings", "--checkpoint", ckpt.to_str().unwrap(), "--split", "val", "--output", path.to_str().unwrap()]).status.success());
    assert_eq!(first, fs::read(&path).unwrap());
}

#[test]
fn lambda_sweep_writes_one_record_per_value() {
    let f = fixture("epochs = 1\n");
    let o = tgad(&["sweep", "--config", f.config.to_str().unwrap(), "--param", "lambda", "--values", "0.001,0.01,0.1,1,10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(f.out.join("sweep_lambda.tsv")).unwrap();
    assert_eq!(table.lines().next(), Some("lambda\tauc"));
    assert_eq!(table.lines().skip(1).count(), 5, "{table}");
    for i in 0..5 {
        let m = read_json(&f.out.join(format!("lambda_{i}")).join("metrics_test.json"));
        assert!(m["auc"].as_f64().is_some());
    }
}

#[test]
fn exit_codes() {
    assert_eq!(tgad(&["--help"]).status.code(), Some(0));
    assert_eq!(tgad(&["train"]).status.code(), Some(1));
    let f = fixture("no_such_key = 3\n");
    assert_eq!(tgad(&["train", "--config", f.config.to_str().unwrap()]).status.code(), Some(1));
    let f = fixture("");
    let cfg = f.config.to_str().unwrap();
    assert_eq!(tgad(&["train", "--config", cfg, "--set", "lr=-1"]).status.code(), Some(1));
    assert_eq!(tgad(&["train", "--config", cfg, "--set", "dataset=/nonexistent/graph.txt"]).status.code(), Some(2));
    assert_eq!(tgad(&["evaluate", "--checkpoint", "/nonexistent/checkpoint.bin"]).status.code(), Some(1));
}
