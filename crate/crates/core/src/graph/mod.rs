//! Snapshot graphs over a fixed node universe.
//!
//! Raw timestamped edges are parsed by [`ingest`], grouped into snapshots by
//! [`bucket`], and held as an immutable [`DynamicGraph`]. Every snapshot shares
//! the same dense node index `0..N`; nodes that are absent from a snapshot are
//! simply isolated there.

mod bucket;
mod ingest;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use bucket::{bucket_snapshots, BucketPolicy, FeatureKind};
pub use ingest::{load_edge_stream, parse_edge_stream, Column, ColumnSpec, TimestampedEdge};

/// A directed edge between dense node indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl Edge {
    pub fn new(src: usize, dst: usize) -> Self {
        Edge {
            src,
            dst,
            weight: None,
        }
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.src, self.dst)
    }
}

/// One time bucket: a simple directed graph plus node features.
#[derive(Debug, Clone)]
pub struct Snapshot {
    index: usize,
    edges: Vec<Edge>,
    features: Arc<Tensor>,
    /// Sorted union of in- and out-neighbours per node.
    sym_adj: Vec<Vec<usize>>,
    time_range: Option<(f64, f64)>,
    raw_edge_count: usize,
}

impl Snapshot {
    /// Builds a snapshot, collapsing duplicate `(src, dst)` pairs to one edge
    /// that keeps the largest weight. Edges come out sorted by `(src, dst)`.
    pub fn new(index: usize, edges: Vec<Edge>, features: Arc<Tensor>) -> Result<Self> {
        let n = features.nrows();
        let raw_edge_count = edges.len();
        let mut edges = edges;
        for e in &edges {
            for id in [e.src, e.dst] {
                if id >= n {
                    return Err(Error::Index { index: id, len: n });
                }
            }
        }
        edges.sort_by_key(Edge::pair);
        let mut dedup: Vec<Edge> = Vec::with_capacity(edges.len());
        for e in edges {
            match dedup.last_mut() {
                Some(last) if last.pair() == e.pair() => {
                    last.weight = match (last.weight, e.weight) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        (a, b) => a.or(b),
                    };
                }
                _ => dedup.push(e),
            }
        }
        let mut sym_adj = vec![Vec::new(); n];
        for e in &dedup {
            sym_adj[e.src].push(e.dst);
            if e.src != e.dst {
                sym_adj[e.dst].push(e.src);
            }
        }
        for row in &mut sym_adj {
            row.sort_unstable();
            row.dedup();
        }
        Ok(Snapshot {
            index,
            edges: dedup,
            features,
            sym_adj,
            time_range: None,
            raw_edge_count,
        })
    }

    pub fn with_time_range(mut self, start: f64, end: f64) -> Self {
        self.time_range = Some((start, end));
        self
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn shared_features(&self) -> Arc<Tensor> {
        Arc::clone(&self.features)
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        self.time_range
    }

    /// Number of input edges that fell into this bucket before deduplication.
    pub fn raw_edge_count(&self) -> usize {
        self.raw_edge_count
    }

    pub fn contains(&self, src: usize, dst: usize) -> bool {
        self.edges
            .binary_search_by(|e| e.pair().cmp(&(src, dst)))
            .is_ok()
    }

    /// Position of `(src, dst)` in [`Snapshot::edges`].
    pub fn edge_position(&self, src: usize, dst: usize) -> Option<usize> {
        self.edges
            .binary_search_by(|e| e.pair().cmp(&(src, dst)))
            .ok()
    }

    /// Symmetrised neighbourhood of `node`, ascending.
    pub fn neighbors(&self, node: usize) -> Result<&[usize]> {
        self.sym_adj
            .get(node)
            .map(Vec::as_slice)
            .ok_or(Error::Index {
                index: node,
                len: self.num_nodes(),
            })
    }

    /// Same snapshot restricted to the given subset of its edges.
    pub fn restrict_to(&self, keep: &[(usize, usize)]) -> Result<Snapshot> {
        let mut kept = Vec::with_capacity(keep.len());
        for &(s, d) in keep {
            let pos = self.edge_position(s, d).ok_or_else(|| {
                Error::Data(format!("edge ({s}, {d}) not in snapshot {}", self.index))
            })?;
            kept.push(self.edges[pos]);
        }
        let mut snap = Snapshot::new(self.index, kept, Arc::clone(&self.features))?;
        snap.time_range = self.time_range;
        Ok(snap)
    }
}

/// Free-function form of [`Snapshot::neighbors`].
pub fn neighbors(snapshot: &Snapshot, node: usize) -> Result<&[usize]> {
    snapshot.neighbors(node)
}

/// Ordered snapshots over a shared node universe.
#[derive(Debug, Clone)]
pub struct DynamicGraph {
    snapshots: Vec<Snapshot>,
    raw_ids: Vec<u64>,
    index: HashMap<u64, usize>,
}

impl DynamicGraph {
    pub fn new(raw_ids: Vec<u64>, snapshots: Vec<Snapshot>) -> Result<Self> {
        let n = raw_ids.len();
        let d = snapshots.first().map(|s| s.features().ncols()).unwrap_or(0);
        for (t, s) in snapshots.iter().enumerate() {
            if s.index() != t {
                return Err(Error::Data(format!(
                    "snapshot ordinal {} at position {t}",
                    s.index()
                )));
            }
            if s.num_nodes() != n || s.features().ncols() != d {
                return Err(Error::shape(
                    "DynamicGraph::new",
                    format!(
                        "snapshot {t} features are {}x{}, expected {n}x{d}",
                        s.num_nodes(),
                        s.features().ncols()
                    ),
                ));
            }
        }
        let index = raw_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        Ok(DynamicGraph {
            snapshots,
            raw_ids,
            index,
        })
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn snapshot(&self, t: usize) -> Option<&Snapshot> {
        self.snapshots.get(t)
    }

    /// Like [`DynamicGraph::snapshot`] but out-of-range is an error.
    pub fn at(&self, t: usize) -> Result<&Snapshot> {
        self.snapshots.get(t).ok_or(Error::Index {
            index: t,
            len: self.snapshots.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.snapshots
            .first()
            .map(|s| s.features().ncols())
            .unwrap_or(0)
    }

    pub fn dense_id(&self, raw: u64) -> Option<usize> {
        self.index.get(&raw).copied()
    }

    pub fn raw_id(&self, dense: usize) -> Option<u64> {
        self.raw_ids.get(dense).copied()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw_ids
    }

    pub fn summary(&self) -> GraphSummary {
        GraphSummary {
            num_nodes: self.num_nodes(),
            feature_dim: self.feature_dim(),
            num_snapshots: self.len(),
            snapshots: self
                .snapshots
                .iter()
                .map(|s| SnapshotSummary {
                    index: s.index(),
                    num_edges: s.num_edges(),
                    raw_edges: s.raw_edge_count(),
                    time_start: s.time_range().map(|r| r.0),
                    time_end: s.time_range().map(|r| r.1),
                })
                .collect(),
        }
    }

    /// Canonical JSON encoding of the full graph (ids, edges, features).
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct SnapOut<'a> {
            index: usize,
            edges: &'a [Edge],
            features: Vec<f64>,
            time_range: Option<(f64, f64)>,
        }
        #[derive(Serialize)]
        struct GraphOut<'a> {
            raw_ids: &'a [u64],
            feature_dim: usize,
            snapshots: Vec<SnapOut<'a>>,
        }
        let out = GraphOut {
            raw_ids: &self.raw_ids,
            feature_dim: self.feature_dim(),
            snapshots: self
                .snapshots
                .iter()
                .map(|s| SnapOut {
                    index: s.index(),
                    edges: s.edges(),
                    features: s.features().iter().copied().collect(),
                    time_range: s.time_range(),
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&out)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub index: usize,
    pub num_edges: usize,
    pub raw_edges: usize,
    pub time_start: Option<f64>,
    pub time_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_snapshots: usize,
    pub snapshots: Vec<SnapshotSummary>,
}
