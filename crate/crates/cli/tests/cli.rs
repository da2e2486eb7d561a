use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tgexplain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgexplain"))
        .args(args)
        .env("TGEXPLAIN_OUTPUT_DIR", dir)
        .env("TGEXPLAIN_THREADS", "1")
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--set", "synth.num_nodes=10",
    "--set", "synth.num_snapshots=6",
    "--set", "synth.motif_size=5",
    "--set", "synth.noise_edges_per_snapshot=4",
    "--set", "model.backbone.hidden_dim=8",
    "--set", "model.explainer.structural_dim=4",
    "--set", "model.explainer.temporal_dim=4",
    "--set", "model.head_hidden=4",
    "--set", "train.max_backbone_epochs=3",
    "--set", "train.buffer_size=3",
    "--set", "train.mrr_negatives=5",
    "--set", "regularizers.anchors=4",
    "--set", "regularizers.negatives=2",
    "--set", "data.buckets={\"fixed_duration\":1.0}",
    "--set", "data.features=\"identity\"",
];

fn with_small<'a>(cmd: &'a str, data: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(SMALL);
    v.extend_from_slice(&["--set", data]);
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let data = format!("data.path={}", dir.path().join("edges.txt").display());
    for cmd in ["synth", "ingest", "train", "eval", "explain", "sweep"] {
        let out = tgexplain(dir.path(), &with_small(cmd, &data));
        assert!(out.status.success(), "{cmd} failed: {}", stderr(&out));
        assert!(dir.path().join(format!("{cmd}.manifest.json")).exists());
    }
    for f in ["summary.json", "metrics.jsonl", "structural.csv", "temporal.csv", "eval.json", "sweep.csv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 10, "header plus nine grid rows");
    assert!(sweep.starts_with("sparsity,fidelity\n"));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"bufer_size": 3}}"#).unwrap();
    let out = tgexplain(dir.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error code=E_CONFIG exit=2:"), "{err}");
}

#[test]
fn missing_checkpoint_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = format!("data.path={}", dir.path().join("edges.txt").display());
    assert!(tgexplain(dir.path(), &with_small("synth", &data)).status.success());
    for cmd in ["eval", "explain"] {
        let out = tgexplain(dir.path(), &with_small(cmd, &data));
        assert_eq!(out.status.code(), Some(3), "{cmd}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error code=E_DATA"));
    }
}

#[test]
fn malformed_edge_file_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let edges = dir.path().join("bad.txt");
    fs::write(&edges, "0 1 0\n1 two 1\n").unwrap();
    let data = format!("data.path={}", edges.display());
    let out = tgexplain(dir.path(), &["ingest", "--set", &data]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).starts_with("error code=E_PARSE"), "{}", stderr(&out));
}
