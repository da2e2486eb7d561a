//! Scoring explanations: top-k edge masks, fidelity against sparsity, and CSV
//! export/import of attention values.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingBuffer;
use crate::error::{Error, Result};
use crate::explainer::{StructuralAttention, TemporalAttention};
use crate::graph::{DynamicGraph, Snapshot};
use crate::numerics::{Tape, Tensor};
use crate::training::{explain_forward, sample_training_pairs, Model};

/// Edges of one snapshot kept by an explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMask {
    pub snapshot: usize,
    /// Sorted `(src, dst)` pairs, a subset of the snapshot's edges.
    pub kept: Vec<(usize, usize)>,
    /// Where the ranking came from, e.g. `"structural"` or an external file name.
    pub source: String,
    pub target_sparsity: f64,
}

impl ExplanationMask {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Mask that keeps every edge of `snapshot`.
    pub fn full(snapshot: &Snapshot) -> Self {
        ExplanationMask {
            snapshot: snapshot.index(),
            kept: snapshot.edges().iter().map(|e| e.pair()).collect(),
            source: "all".into(),
            target_sparsity: 0.0,
        }
    }
}

/// Keeps the `ceil((1 - s) * |E|)` highest-gate edges, ties broken by `(src, dst)`.
pub fn topk_edge_mask(att: &StructuralAttention, target_sparsity: f64) -> Result<ExplanationMask> {
    let e = att.edges.len();
    if e == 0 {
        return Err(Error::Data(format!("snapshot {} has no edges to rank", att.snapshot)));
    }
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::Config(format!("sparsity {target_sparsity} outside [0, 1]")));
    }
    let mut k = ((1.0 - target_sparsity) * e as f64).ceil() as usize;
    if k == 0 {
        warn!("sparsity {target_sparsity} leaves no edges in snapshot {}; keeping one", att.snapshot);
        k = 1;
    }
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| {
        att.gates[b]
            .total_cmp(&att.gates[a])
            .then_with(|| att.edges[a].cmp(&att.edges[b]))
    });
    let mut kept: Vec<(usize, usize)> = order[..k.min(e)].iter().map(|&p| att.edges[p]).collect();
    kept.sort_unstable();
    Ok(ExplanationMask {
        snapshot: att.snapshot,
        kept,
        source: "structural".into(),
        target_sparsity,
    })
}

pub fn sparsity(mask: &ExplanationMask, snapshot: &Snapshot) -> Result<f64> {
    if snapshot.num_edges() == 0 {
        return Err(Error::Data(format!("snapshot {} has no edges", snapshot.index())));
    }
    Ok(1.0 - mask.len() as f64 / snapshot.num_edges() as f64)
}

/// Trained model frozen over a filled buffer; the newest buffered entry is
/// the snapshot being explained.
pub struct Predictor<'a> {
    model: &'a Model,
    graph: &'a DynamicGraph,
    buffer: &'a EmbeddingBuffer,
    tau: f64,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, graph: &'a DynamicGraph, buffer: &'a EmbeddingBuffer, tau: f64) -> Result<Self> {
        if buffer.is_empty() {
            return Err(Error::Data("predictor needs a non-empty buffer".into()));
        }
        Ok(Predictor {
            model,
            graph,
            buffer,
            tau,
        })
    }

    pub fn snapshot(&self) -> Result<&'a Snapshot> {
        let (ord, _) = self.buffer.latest().expect("checked non-empty");
        self.graph.at(ord)
    }

    /// Link probabilities with optionally a replacement graph for the newest snapshot.
    pub fn probabilities(&self, masked: Option<&Snapshot>, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let entries: Vec<(usize, &Tensor)> = self.buffer.entries().collect();
        let mut tape = Tape::new();
        let fwd = explain_forward(&mut tape, self.model, self.graph, &entries, None, self.tau, masked)?;
        let emb = tape.value(fwd.output).clone();
        self.model.head.scores(&self.model.store, &emb, pairs)
    }

    fn masked_probabilities(&self, mask: &ExplanationMask, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let snap = self.snapshot()?;
        if mask.snapshot != snap.index() {
            return Err(Error::Data(format!(
                "mask is for snapshot {} but the predictor explains {}",
                mask.snapshot,
                snap.index()
            )));
        }
        let restricted = snap.restrict_to(&mask.kept)?;
        self.probabilities(Some(&restricted), pairs)
    }
}

/// Positive links of `future` plus `negatives_per_positive` sampled non-links each.
pub fn eval_edges(future: &Snapshot, negatives_per_positive: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    sample_training_pairs(future, negatives_per_positive, rng).map(|(pairs, _)| pairs)
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute change in predicted probability over `eval` when the explained
/// snapshot is cut down to `mask`.
pub fn fidelity(pred: &Predictor, mask: &ExplanationMask, eval: &[(usize, usize)]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Data("empty evaluation edge set".into()));
    }
    let base = pred.probabilities(None, eval)?;
    let masked = pred.masked_probabilities(mask, eval)?;
    Ok(mean_abs_diff(&base, &masked))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub target: f64,
    pub sparsity: f64,
    pub fidelity: f64,
}

/// One row per grid point, in grid order; grid points run in parallel.
pub fn fidelity_sweep(
    pred: &Predictor,
    att: &StructuralAttention,
    grid: &[f64],
    eval: &[(usize, usize)],
) -> Result<Vec<SweepRow>> {
    if eval.is_empty() {
        return Err(Error::Data("empty evaluation edge set".into()));
    }
    if let Some(bad) = grid.iter().find(|s| !(0.0..1.0).contains(*s)) {
        return Err(Error::Config(format!("sweep sparsity {bad} outside [0, 1)")));
    }
    let snap = pred.snapshot()?;
    let base = pred.probabilities(None, eval)?;
    grid.par_iter()
        .map(|&s| {
            let mask = topk_edge_mask(att, s)?;
            let masked = pred.masked_probabilities(&mask, eval)?;
            Ok(SweepRow {
                target: s,
                sparsity: sparsity(&mask, snap)?,
                fidelity: mean_abs_diff(&base, &masked),
            })
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(["sparsity", "fidelity"]).map_err(io)?;
    for r in rows {
        w.write_record([num(r.sparsity), num(r.fidelity)]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gate values as `snapshot,src,dst,gate_value`. With a tracking list, one row
/// per tracked edge per snapshot, 0.0 where the edge is absent; without one,
/// every edge of every snapshot.
pub fn export_structural(
    atts: &[StructuralAttention],
    tracking: Option<&[(usize, usize)]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(["snapshot", "src", "dst", "gate_value"]).map_err(io)?;
    for att in atts {
        let rows: Vec<((usize, usize), f64)> = match tracking {
            Some(list) => list.iter().map(|&(s, d)| ((s, d), att.get(s, d))).collect(),
            None => att.edges.iter().copied().zip(att.gates.iter().copied()).collect(),
        };
        for ((s, d), g) in rows {
            w.write_record([att.snapshot.to_string(), s.to_string(), d.to_string(), num(g)])
                .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Temporal weights as `node,t_row,t_col,weight`, with rows and columns named
/// by snapshot ordinal. Masked-out cells are skipped.
pub fn export_temporal(att: &TemporalAttention, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(["node", "t_row", "t_col", "weight"]).map_err(io)?;
    let (n, b, _) = att.weights.dim();
    for i in 0..n {
        for k in 0..b {
            for j in 0..b {
                if att.mask[[k, j]] {
                    let rec = [
                        i.to_string(),
                        att.ordinals[k].to_string(),
                        att.ordinals[j].to_string(),
                        num(att.weights[[i, k, j]]),
                    ];
                    w.write_record(rec).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct ImportanceRow {
    snapshot: usize,
    src: usize,
    dst: usize,
    gate_value: f64,
}

/// Reads edge scores in the structural export schema, grouped by snapshot.
pub fn read_importance_csv(path: impl AsRef<Path>) -> Result<BTreeMap<usize, Vec<((usize, usize), f64)>>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: BTreeMap<usize, Vec<((usize, usize), f64)>> = BTreeMap::new();
    for (line, row) in r.deserialize::<ImportanceRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: line + 2,
            msg: e.to_string(),
        })?;
        if !row.gate_value.is_finite() {
            return Err(Error::Parse {
                line: line + 2,
                msg: "non-finite gate_value".into(),
            });
        }
        out.entry(row.snapshot).or_default().push(((row.src, row.dst), row.gate_value));
    }
    Ok(out)
}

/// Aligns externally supplied scores to `snapshot`'s edges so they can be
/// scored by the same sweep. Unlisted edges score 0; listed non-edges are an error.
pub fn external_attention(snapshot: &Snapshot, scores: &[((usize, usize), f64)]) -> Result<StructuralAttention> {
    let edges: Vec<(usize, usize)> = snapshot.edges().iter().map(|e| e.pair()).collect();
    let mut gates = vec![0.0; edges.len()];
    for &((s, d), v) in scores {
        let p = snapshot
            .edge_position(s, d)
            .ok_or_else(|| Error::Data(format!("scored edge ({s}, {d}) not in snapshot {}", snapshot.index())))?;
        gates[p] = v;
    }
    Ok(StructuralAttention {
        snapshot: snapshot.index(),
        logits: gates.clone(),
        edges,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use ndarray::{Array2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::explainer::ExplainerConfig;
    use crate::graph::Edge;
    use crate::training::ModelConfig;

    fn att(edges: &[(usize, usize)], gates: &[f64]) -> StructuralAttention {
        StructuralAttention {
            snapshot: 0,
            edges: edges.to_vec(),
            gates: gates.to_vec(),
            logits: gates.to_vec(),
        }
    }

    fn ring(n: usize, index: usize, feats: &Arc<Tensor>) -> Snapshot {
        let es = (0..n).map(|i| Edge::new(i, (i + 1) % n)).collect();
        Snapshot::new(index, es, Arc::clone(feats)).unwrap()
    }

    #[test]
    fn keeps_requested_fraction() {
        let edges: Vec<_> = (0..100).map(|i| (i / 10, i % 10)).collect();
        let gates: Vec<_> = (0..100).map(|i| i as f64 / 100.0).collect();
        let m = topk_edge_mask(&att(&edges, &gates), 0.8).unwrap();
        assert_eq!(m.len(), 20);
        assert!(m.kept.iter().all(|&(s, _)| s >= 8));
    }

    #[test]
    fn ties_go_to_smallest_pairs() {
        let edges = [(0, 1), (0, 2), (1, 0), (2, 3)];
        let m = topk_edge_mask(&att(&edges, &[0.5; 4]), 0.5).unwrap();
        assert_eq!(m.kept, vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn random_gates_match_sort_and_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Vec<_> = (0..10).map(|i| (i, (i * 3 + 1) % 10)).collect();
        let mut edges = edges;
        edges.sort_unstable();
        let gates: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
        let m = topk_edge_mask(&att(&edges, &gates), 0.3).unwrap();
        let mut pairs: Vec<(f64, (usize, usize))> = gates.iter().copied().zip(edges.iter().copied()).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut expect: Vec<_> = pairs[..7].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        assert_eq!(m.kept, expect);
    }

    #[test]
    fn full_sparsity_keeps_one_edge() {
        let m = topk_edge_mask(&att(&[(0, 1), (1, 2)], &[0.1, 0.9]), 1.0).unwrap();
        assert_eq!(m.kept, vec![(1, 2)]);
    }

    #[test]
    fn sparsity_arithmetic() {
        let feats = Arc::new(Array2::eye(10));
        let snap9 = Snapshot::new(0, (0..9).map(|i| Edge::new(i, i + 1)).collect(), Arc::clone(&feats)).unwrap();
        let mut m = ExplanationMask::full(&snap9);
        assert_eq!(sparsity(&m, &snap9).unwrap(), 0.0);
        m.kept.truncate(7);
        assert!((sparsity(&m, &snap9).unwrap() - 0.2222).abs() < 1e-4);
        let big: Vec<_> = (0..100).map(|i| Edge::new(i / 10, i % 10)).collect();
        let snap = Snapshot::new(0, big, feats).unwrap();
        let mut m = ExplanationMask::full(&snap);
        m.kept.truncate(20);
        assert!((sparsity(&m, &snap).unwrap() - 0.8).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn masks_are_nested_and_quantized(
            gates in proptest::collection::vec(0.0f64..1.0, 1..30),
            s1 in 0.0f64..1.0,
            s2 in 0.0f64..1.0,
        ) {
            let edges: Vec<_> = (0..gates.len()).map(|i| (i, i + 1)).collect();
            let a = att(&edges, &gates);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let dense = topk_edge_mask(&a, lo).unwrap();
            let sparse = topk_edge_mask(&a, hi).unwrap();
            proptest::prop_assert!(sparse.kept.iter().all(|e| dense.kept.contains(e)));
            let e = gates.len() as f64;
            let actual = 1.0 - dense.len() as f64 / e;
            proptest::prop_assert!(actual <= lo + 1e-12 && lo - actual < 1.0 / e + 1e-12);
        }
    }

    struct Fixture {
        model: Model,
        graph: DynamicGraph,
        buffer: EmbeddingBuffer,
    }

    fn fixture(seed: u64) -> Fixture {
        let n = 6;
        let feats = Arc::new(Array2::eye(n));
        let es = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)];
        let s0 = ring(n, 0, &feats);
        let s1 = Snapshot::new(1, es.iter().map(|&(a, b)| Edge::new(a, b)).collect(), Arc::clone(&feats)).unwrap();
        let s2 = ring(n, 2, &feats);
        let graph = DynamicGraph::new((0..n as u64).collect(), vec![s0, s1, s2]).unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                hidden_dim: 5,
                ..Default::default()
            },
            explainer: ExplainerConfig {
                structural_dim: 4,
                temporal_dim: 3,
                force_open_gates: true,
                ..Default::default()
            },
            head_hidden: 4,
        };
        let model = Model::new(n, &cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buffer = EmbeddingBuffer::new(3).unwrap();
        for t in 0..2 {
            buffer
                .push(t, Array2::from_shape_fn((n, 5), |_| rng.gen_range(-1.0..1.0)))
                .unwrap();
        }
        Fixture { model, graph, buffer }
    }

    #[test]
    fn all_edges_mask_has_zero_fidelity() {
        for seed in 0..4 {
            let f = fixture(seed);
            let p = Predictor::new(&f.model, &f.graph, &f.buffer, 0.1).unwrap();
            let eval: Vec<_> = (0..6).map(|i| (i, (i + 2) % 6)).collect();
            let full = ExplanationMask::full(p.snapshot().unwrap());
            assert_eq!(fidelity(&p, &full, &eval).unwrap(), 0.0);
        }
    }

    #[test]
    fn exhaustive_masks_match_direct_recomputation() {
        let f = fixture(5);
        let p = Predictor::new(&f.model, &f.graph, &f.buffer, 0.1).unwrap();
        let snap = f.graph.at(1).unwrap();
        let edges: Vec<_> = snap.edges().iter().map(|e| e.pair()).collect();
        let eval: Vec<_> = (0..6).flat_map(|i| [(i, (i + 1) % 6), (i, (i + 3) % 6)]).collect();
        let entries: Vec<(usize, &Tensor)> = f.buffer.entries().collect();
        let probs = |s: &Snapshot| {
            let mut tape = Tape::new();
            let fwd = explain_forward(&mut tape, &f.model, &f.graph, &entries, None, 0.1, Some(s)).unwrap();
            let emb = tape.value(fwd.output).clone();
            f.model.head.scores(&f.model.store, &emb, &eval).unwrap()
        };
        let base = probs(snap);
        let mut zeros = 0;
        for bits in 0u32..32 {
            let kept: Vec<_> = (0..5).filter(|b| bits >> b & 1 == 1).map(|b| edges[b]).collect();
            let masked = probs(&snap.restrict_to(&kept).unwrap());
            let expect = base.iter().zip(&masked).map(|(a, b)| (a - b).abs()).sum::<f64>() / eval.len() as f64;
            let mask = ExplanationMask {
                snapshot: 1,
                kept,
                source: "enum".into(),
                target_sparsity: 0.0,
            };
            let got = fidelity(&p, &mask, &eval).unwrap();
            assert_eq!(got, expect);
            if got == 0.0 {
                zeros += 1;
                assert_eq!(bits, 31);
            }
        }
        assert_eq!(zeros, 1);
    }

    #[test]
    fn fidelity_ignores_eval_order() {
        let f = fixture(2);
        let p = Predictor::new(&f.model, &f.graph, &f.buffer, 0.1).unwrap();
        let mut eval: Vec<_> = (0..6).map(|i| (i, (i + 2) % 6)).collect();
        let mask = ExplanationMask {
            snapshot: 1,
            kept: vec![(0, 1), (3, 4)],
            source: "t".into(),
            target_sparsity: 0.6,
        };
        let a = fidelity(&p, &mask, &eval).unwrap();
        eval.reverse();
        let b = fidelity(&p, &mask, &eval).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(fidelity(&p, &mask, &[]).is_err());
    }

    #[test]
    fn single_edge_difference() {
        assert!((mean_abs_diff(&[0.9], &[0.7]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn sweep_rows_follow_grid() {
        let f = fixture(1);
        let p = Predictor::new(&f.model, &f.graph, &f.buffer, 0.1).unwrap();
        let snap = p.snapshot().unwrap();
        let a = att(
            &snap.edges().iter().map(|e| e.pair()).collect::<Vec<_>>(),
            &[0.9, 0.1, 0.5, 0.3, 0.7],
        );
        let a = StructuralAttention { snapshot: 1, ..a };
        let eval: Vec<_> = (0..6).map(|i| (i, (i + 2) % 6)).collect();
        let rows = fidelity_sweep(&p, &a, &[0.0], &eval).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].fidelity, 0.0);
        let rows = fidelity_sweep(&p, &a, &[0.5, 0.2, 0.5], &eval).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], rows[2]);
        assert!((rows[0].sparsity - 0.4).abs() < 1e-12);
        assert!(fidelity_sweep(&p, &a, &[1.0], &eval).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next(), Some("sparsity,fidelity"));
    }

    #[test]
    fn structural_export_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let a2 = StructuralAttention {
            snapshot: 2,
            ..att(&[(4, 7)], &[0.37])
        };
        let a3 = StructuralAttention {
            snapshot: 3,
            ..att(&[(1, 2)], &[0.5])
        };
        export_structural(&[a2.clone(), a3.clone()], Some(&[]), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "snapshot,src,dst,gate_value\n");

        export_structural(&[a2.clone(), a3.clone()], Some(&[(4, 7)]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "snapshot,src,dst,gate_value\n2,4,7,0.37\n3,4,7,0.0\n");

        export_structural(&[a2, a3], None, &path).unwrap();
        let back = read_importance_csv(&path).unwrap();
        assert_eq!(back[&2], vec![((4, 7), 0.37)]);
        assert_eq!(back[&3], vec![((1, 2), 0.5)]);

        let bad = dir.path().join("missing").join("x.csv");
        assert!(matches!(export_structural(&[], None, &bad), Err(Error::Io { .. })));
    }

    #[test]
    fn external_scores_align_to_snapshot() {
        let feats = Arc::new(Array2::eye(4));
        let snap = ring(4, 0, &feats);
        let a = external_attention(&snap, &[((2, 3), 0.8)]).unwrap();
        assert_eq!(a.gates, vec![0.0, 0.0, 0.8, 0.0]);
        assert!(external_attention(&snap, &[((0, 2), 0.1)]).is_err());
    }

    #[test]
    fn temporal_export_skips_masked_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut w = Array3::zeros((1, 2, 2));
        w[[0, 0, 0]] = 1.0;
        w[[0, 1, 0]] = 0.25;
        w[[0, 1, 1]] = 0.75;
        let t = TemporalAttention {
            ordinals: vec![3, 4],
            mask: Array2::from_shape_fn((2, 2), |(k, j)| j <= k),
            weights: w,
        };
        export_temporal(&t, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "node,t_row,t_col,weight\n0,3,3,1.0\n0,4,3,0.25\n0,4,4,0.75\n");
    }
}
