//! Run configuration, command-line style overrides, and the stage runners
//! behind each subcommand. Every stage writes a manifest next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::explain_eval::{
    eval_edges, export_structural, export_temporal, fidelity_sweep, write_sweep_csv, Predictor, SweepRow,
};
use crate::explainer::StructuralAttention;
use crate::graph::{bucket_snapshots, load_edge_stream, BucketPolicy, ColumnSpec, DynamicGraph, FeatureKind};
use crate::regularizers::RegularizerConfig;
use crate::synthetic::{generate_planted, write_planted, PlantedSpec};
use crate::training::{explain_buffer, headline_mrr, live_update, replay_mrr, stream, Model, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Column layout, e.g. `"src,dst,weight,time"`.
    pub columns: String,
    pub buckets: BucketPolicy,
    pub features: FeatureKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            columns: "src,dst,time".into(),
            buckets: BucketPolicy::FixedCount(10),
            features: FeatureKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sparsity_grid: Vec<f64>,
    /// Sampled non-links per positive in the fidelity evaluation set.
    pub eval_negatives: usize,
    /// Edges (dense node indices) to report in every snapshot of the
    /// structural export; `None` exports each snapshot's own edges.
    pub tracking: Option<Vec<(usize, usize)>>,
    /// Externally known MRR (mean, spread) echoed in the train report.
    pub reference_mrr: Option<(f64, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sparsity_grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            eval_negatives: 1,
            tracking: None,
            reference_mrr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single source of randomness; copied into the training and generator seeds.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for parallel sections; 1 gives bit-reproducible runs.
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub synth: PlantedSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularizers: RegularizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: None,
            data: DataConfig::default(),
            synth: PlantedSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            regularizers: RegularizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Applies `a.b.c=value` overrides to a JSON tree. The value is read as JSON
/// when it parses, otherwise as a string.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} has an empty segment")));
        }
        let mut node = &mut *root;
        for p in &parts[..parts.len() - 1] {
            if !node.is_object() {
                *node = Value::Object(Default::default());
            }
            node = node
                .as_object_mut()
                .expect("object ensured above")
                .entry(p.to_string())
                .or_insert(Value::Object(Default::default()));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node.as_object_mut()
            .expect("object ensured above")
            .insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

impl RunConfig {
    /// Strict parse of a JSON config (`None` = all defaults) with overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let mut tree = serde_json::to_value(&base)?;
        apply_overrides(&mut tree, overrides)?;
        let cfg: RunConfig = serde_json::from_value(tree).map_err(config_err)?;
        cfg.resolved()
    }

    /// Copies the top-level seed into each stage and validates everything.
    pub fn resolved(mut self) -> Result<Self> {
        for (name, s) in [("train.seed", self.train.seed), ("synth.seed", self.synth.seed)] {
            if s != 0 && s != self.seed {
                return Err(Error::Config(format!("{name} = {s} disagrees with seed = {}; set only the top-level seed", self.seed)));
            }
        }
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.regularizers.validate()?;
        if self.eval.eval_negatives == 0 {
            return Err(Error::Config("eval.eval_negatives must be >= 1".into()));
        }
        Ok(self)
    }

    /// Runs `f` inside a pool capped at `threads` workers when set.
    pub fn with_threads<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.threads {
            None => f(),
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(config_err)?
                .install(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub versions: Vec<(String, String)>,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(cfg: &RunConfig, command: &str, inputs: &[PathBuf], outputs: &[&str]) -> Result<PathBuf> {
    let digest = |p: &Path, shown: PathBuf| -> Result<FileDigest> {
        Ok(FileDigest {
            path: shown,
            sha256: sha256_file(p)?,
        })
    };
    let manifest = RunManifest {
        command: command.into(),
        seed: cfg.seed,
        versions: vec![("tgexplain".into(), env!("CARGO_PKG_VERSION").into())],
        config: cfg.clone(),
        inputs: inputs.iter().map(|p| digest(p, p.clone())).collect::<Result<_>>()?,
        outputs: outputs
            .iter()
            .map(|name| digest(&cfg.output_dir.join(name), PathBuf::from(name)))
            .collect::<Result<_>>()?,
    };
    let path = cfg.output_dir.join(format!("{command}.manifest.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))
}

pub fn load_graph(cfg: &RunConfig) -> Result<DynamicGraph> {
    let spec: ColumnSpec = cfg.data.columns.parse()?;
    let edges = load_edge_stream(data_path(cfg)?, &spec)?;
    bucket_snapshots(&edges, cfg.data.buckets, cfg.data.features)
}

fn write_node_index(graph: &DynamicGraph, path: &Path) -> Result<()> {
    let mut text = String::from("dense,raw\n");
    for (i, raw) in graph.raw_ids().iter().enumerate() {
        text.push_str(&format!("{i},{raw}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Buckets the input stream and writes `summary.json` and `nodes.csv`.
pub fn run_ingest(cfg: &RunConfig) -> Result<DynamicGraph> {
    ensure_output_dir(cfg)?;
    let graph = load_graph(cfg)?;
    write_json(&cfg.output_dir.join("summary.json"), &graph.summary())?;
    write_node_index(&graph, &cfg.output_dir.join("nodes.csv"))?;
    write_manifest(cfg, "ingest", &[data_path(cfg)?.to_path_buf()], &["summary.json", "nodes.csv"])?;
    Ok(graph)
}

/// Writes a planted dataset (`edges.txt`, `truth.json`) into the output directory.
pub fn run_synth(cfg: &RunConfig) -> Result<()> {
    ensure_output_dir(cfg)?;
    let (graph, truth) = generate_planted(&cfg.synth)?;
    write_planted(&graph, &truth, &cfg.output_dir)?;
    write_manifest(cfg, "synth", &[], &["edges.txt", "truth.json"])?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub snapshots: usize,
    pub steps: usize,
    pub headline_mrr: Option<f64>,
    pub mean_mrr: Option<f64>,
    pub reference_mrr: Option<(f64, f64)>,
}

fn tracking(cfg: &RunConfig) -> Option<&[(usize, usize)]> {
    cfg.eval.tracking.as_deref()
}

/// Live-update training over the configured stream. Writes `metrics.jsonl`,
/// `structural.csv` (every step), `temporal.csv` (last step), `checkpoint.bin`,
/// `report.json` and `timings.json`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    ensure_output_dir(cfg)?;
    let graph = load_graph(cfg)?;
    cfg.with_threads(|| train_on(cfg, &graph, &[data_path(cfg)?.to_path_buf()]))
}

/// [`run_train`] on an in-memory graph; `inputs` are digested into the manifest.
pub fn train_on(cfg: &RunConfig, graph: &DynamicGraph, inputs: &[PathBuf]) -> Result<TrainReport> {
    ensure_output_dir(cfg)?;
    let out = &cfg.output_dir;
    let mut model = Model::new(graph.feature_dim(), &cfg.model, cfg.seed)?;
    let run = live_update(graph, &mut model, &cfg.train, &cfg.regularizers)?;

    let mut metrics = Vec::new();
    for r in &run.records {
        metrics.extend(serde_json::to_vec(r)?);
        metrics.push(b'\n');
    }
    let path = out.join("metrics.jsonl");
    fs::write(&path, metrics).map_err(|e| Error::io(&path, e))?;
    let structural: Vec<StructuralAttention> = run.explanations.iter().map(|e| e.structural.clone()).collect();
    export_structural(&structural, tracking(cfg), out.join("structural.csv"))?;
    let last = run.explanations.last().expect("at least one step");
    export_temporal(&last.temporal, out.join("temporal.csv"))?;
    Checkpoint {
        model,
        state: run.session.state.clone(),
        buffer: run.session.buffer.clone(),
    }
    .save(out.join("checkpoint.bin"))?;
    write_json(&out.join("timings.json"), &run.timings)?;

    let scored: Vec<f64> = run.records.iter().filter_map(|r| r.mrr).collect();
    let report = TrainReport {
        snapshots: graph.len(),
        steps: run.records.len(),
        headline_mrr: headline_mrr(&run.records),
        mean_mrr: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        reference_mrr: cfg.eval.reference_mrr,
    };
    write_json(&out.join("report.json"), &report)?;
    info!(
        "trained {} steps; headline mrr {}",
        report.steps,
        report.headline_mrr.map_or("n/a".into(), |m| format!("{m:.4}"))
    );
    write_manifest(
        cfg,
        "train",
        inputs,
        &["metrics.jsonl", "structural.csv", "temporal.csv", "checkpoint.bin", "report.json"],
    )?;
    Ok(report)
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.output_dir.join("checkpoint.bin"), Path::to_path_buf)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_step: Vec<Option<f64>>,
    pub headline_mrr: Option<f64>,
}

/// Replays the stream through the frozen checkpointed model; writes `eval.json`.
pub fn run_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    ensure_output_dir(cfg)?;
    let ck_path = checkpoint_path(cfg, checkpoint);
    let ck = load_checkpoint(&ck_path)?;
    let graph = load_graph(cfg)?;
    let per_step = cfg.with_threads(|| replay_mrr(&graph, &ck.model, &cfg.train))?;
    let keep = (per_step.len() as f64 * 0.6).ceil() as usize;
    let tail: Vec<f64> = per_step[per_step.len() - keep..].iter().flatten().copied().collect();
    let report = EvalReport {
        headline_mrr: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
        per_step,
    };
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    write_manifest(cfg, "eval", &[data_path(cfg)?.to_path_buf(), ck_path], &["eval.json"])?;
    Ok(report)
}

/// Deterministic explanation of the checkpointed buffer: structural gates of
/// every buffered snapshot and the newest temporal attention.
pub fn run_explain(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    ensure_output_dir(cfg)?;
    let ck_path = checkpoint_path(cfg, checkpoint);
    let ck = load_checkpoint(&ck_path)?;
    let graph = load_graph(cfg)?;
    let (structural, temporal, _) = explain_buffer(&ck.model, &graph, &ck.buffer, cfg.train.tau_end)?;
    export_structural(&structural, tracking(cfg), cfg.output_dir.join("explain_structural.csv"))?;
    export_temporal(&temporal, cfg.output_dir.join("explain_temporal.csv"))?;
    write_manifest(
        cfg,
        "explain",
        &[data_path(cfg)?.to_path_buf(), ck_path],
        &["explain_structural.csv", "explain_temporal.csv"],
    )?;
    Ok(())
}

/// Fidelity of top-k structural masks on the newest buffered snapshot, scored
/// on the following snapshot's links; writes `sweep.csv`.
pub fn run_sweep(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<SweepRow>> {
    ensure_output_dir(cfg)?;
    let ck_path = checkpoint_path(cfg, checkpoint);
    let ck = load_checkpoint(&ck_path)?;
    let graph = load_graph(cfg)?;
    let rows = cfg.with_threads(|| sweep_on(cfg, &ck, &graph))?;
    write_sweep_csv(&rows, cfg.output_dir.join("sweep.csv"))?;
    write_manifest(cfg, "sweep", &[data_path(cfg)?.to_path_buf(), ck_path], &["sweep.csv"])?;
    Ok(rows)
}

pub fn sweep_on(cfg: &RunConfig, ck: &Checkpoint, graph: &DynamicGraph) -> Result<Vec<SweepRow>> {
    let (structural, _, _) = explain_buffer(&ck.model, graph, &ck.buffer, cfg.train.tau_end)?;
    let att = structural.last().expect("non-empty buffer");
    let future = graph.at(att.snapshot + 1)?;
    let mut rng = stream(cfg.seed, "eval-edges", att.snapshot as u64, 0);
    let eval = eval_edges(future, cfg.eval.eval_negatives, &mut rng)?;
    let pred = Predictor::new(&ck.model, graph, &ck.buffer, cfg.train.tau_end)?;
    fidelity_sweep(&pred, att, &cfg.eval.sparsity_grid, &eval)
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn overrides_set_nested_keys() {
        let mut v = json!({"train": {"buffer_size": 5}, "name": "x"});
        apply_overrides(
            &mut v,
            &[
                "train.buffer_size=3".into(),
                "data.path=edges.txt".into(),
                "eval.tracking=[[0,1]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(v["train"]["buffer_size"], json!(3));
        assert_eq!(v["data"]["path"], json!("edges.txt"));
        assert_eq!(v["eval"]["tracking"], json!([[0, 1]]));
        assert!(apply_overrides(&mut v, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut v, &["a..b=1".into()]).is_err());
    }

    #[test]
    fn strict_parsing_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"buffer_size": 3}, "extra": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&path), &[]), Err(Error::Config(_))));
        fs::write(&path, r#"{"train": {"buffer_size": 3}}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.buffer_size, 3);
        assert!(matches!(
            RunConfig::load(Some(&path), &["train.bogus=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::load(None, &["train.buffer_size=0".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_flows_from_the_top_level() {
        let cfg = RunConfig::load(None, &["seed=9".into()]).unwrap();
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
        assert!(RunConfig::load(None, &["seed=9".into(), "train.seed=3".into()]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig::default().resolved().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.eval.sparsity_grid.len(), 9);
    }

    fn small_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            output_dir: dir.join("out"),
            threads: Some(1),
            ..Default::default()
        };
        cfg.synth = PlantedSpec {
            num_nodes: 10,
            num_snapshots: 6,
            motif_size: 5,
            noise_edges_per_snapshot: 4,
            ..Default::default()
        };
        cfg.model.backbone.hidden_dim = 8;
        cfg.model.explainer.structural_dim = 4;
        cfg.model.explainer.temporal_dim = 4;
        cfg.model.head_hidden = 4;
        cfg.train.max_backbone_epochs = 3;
        cfg.train.buffer_size = 3;
        cfg.train.mrr_negatives = 5;
        cfg.regularizers.anchors = 4;
        cfg.regularizers.negatives = 2;
        cfg.data.path = Some(cfg.output_dir.join("edges.txt"));
        cfg.data.buckets = BucketPolicy::FixedDuration(1.0);
        cfg.data.features = FeatureKind::Identity;
        cfg.eval.sparsity_grid = vec![0.0, 0.5];
        cfg.resolved().unwrap()
    }

    #[test]
    fn stages_chain_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        run_synth(&cfg).unwrap();
        let graph = run_ingest(&cfg).unwrap();
        assert_eq!(graph.len(), 6);
        let report = run_train(&cfg).unwrap();
        assert_eq!(report.steps, 5);
        let lines = fs::read_to_string(cfg.output_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 5);
        let eval = run_eval(&cfg, None).unwrap();
        assert_eq!(eval.per_step.len(), 5);
        run_explain(&cfg, None).unwrap();
        let rows = run_sweep(&cfg, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fidelity, 0.0);
        let manifest: RunManifest =
            serde_json::from_slice(&fs::read(cfg.output_dir.join("train.manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.outputs.len(), 5);
        assert_eq!(manifest.seed, 0);
        assert_eq!(
            manifest.outputs[0].sha256,
            sha256_file(&cfg.output_dir.join("metrics.jsonl")).unwrap()
        );
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        run_synth(&cfg).unwrap();
        assert!(matches!(run_eval(&cfg, None), Err(Error::Data(_))));
        assert!(run_explain(&cfg, Some(&dir.path().join("nope.bin"))).is_err());
    }
}
