use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DynamicGraph, Edge, Snapshot, TimestampedEdge};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketPolicy {
    /// `K` equal-width buckets spanning `[t_min, t_max]`.
    FixedCount(usize),
    /// Buckets of width `Δ` starting at `t_min`.
    FixedDuration(f64),
}

/// How node features are built when the input has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// One-hot of the snapshot-0 degree, clamped into `bins` bins, constant over time.
    Degree { bins: usize },
    /// One-hot node identity (`D = N`).
    Identity,
}

impl Default for FeatureKind {
    fn default() -> Self {
        FeatureKind::Degree { bins: 16 }
    }
}

pub fn bucket_snapshots(
    edges: &[TimestampedEdge],
    policy: BucketPolicy,
    features: FeatureKind,
) -> Result<DynamicGraph> {
    if edges.is_empty() {
        return Err(Error::Data("no edges".into()));
    }
    let t_min = edges.iter().map(|e| e.timestamp).fold(f64::INFINITY, f64::min);
    let t_max = edges
        .iter()
        .map(|e| e.timestamp)
        .fold(f64::NEG_INFINITY, f64::max);

    let (num_buckets, width) = match policy {
        BucketPolicy::FixedCount(k) => {
            if k == 0 {
                return Err(Error::Config("bucket count must be at least 1".into()));
            }
            let distinct: BTreeSet<u64> = edges.iter().map(|e| e.timestamp.to_bits()).collect();
            if k > 1 && t_max == t_min {
                return Err(Error::Data(format!(
                    "all timestamps equal; cannot split into {k} buckets"
                )));
            }
            if k > distinct.len() {
                return Err(Error::Data(format!(
                    "{k} buckets requested but only {} distinct timestamps",
                    distinct.len()
                )));
            }
            (k, (t_max - t_min) / k as f64)
        }
        BucketPolicy::FixedDuration(delta) => {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::Config(format!("bucket duration must be > 0, got {delta}")));
            }
            (((t_max - t_min) / delta).floor() as usize + 1, delta)
        }
    };

    let bucket_of = |t: f64| -> usize {
        let idx = match policy {
            BucketPolicy::FixedCount(k) => {
                if t_max == t_min {
                    0
                } else {
                    ((t - t_min) / (t_max - t_min) * k as f64).floor() as usize
                }
            }
            BucketPolicy::FixedDuration(delta) => ((t - t_min) / delta).floor() as usize,
        };
        idx.min(num_buckets - 1)
    };

    let raw_ids: Vec<u64> = edges
        .iter()
        .flat_map(|e| [e.src, e.dst])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dense = |raw: u64| raw_ids.binary_search(&raw).expect("id collected above");

    let mut per_bucket: Vec<Vec<Edge>> = vec![Vec::new(); num_buckets];
    for e in edges {
        per_bucket[bucket_of(e.timestamp)].push(Edge {
            src: dense(e.src),
            dst: dense(e.dst),
            weight: e.weight,
        });
    }

    let n = raw_ids.len();
    let placeholder = Arc::new(Array2::zeros((n, 0)));
    let first = Snapshot::new(0, per_bucket[0].clone(), placeholder)?;
    let feats = Arc::new(build_features(&first, features)?);

    let mut snapshots = Vec::with_capacity(num_buckets);
    for (t, bucket) in per_bucket.into_iter().enumerate() {
        let start = t_min + width * t as f64;
        let end = if t + 1 == num_buckets {
            t_max.max(start)
        } else {
            t_min + width * (t + 1) as f64
        };
        snapshots.push(Snapshot::new(t, bucket, Arc::clone(&feats))?.with_time_range(start, end));
    }
    DynamicGraph::new(raw_ids, snapshots)
}

pub(crate) fn build_features(first: &Snapshot, kind: FeatureKind) -> Result<Array2<f64>> {
    let n = first.num_nodes();
    match kind {
        FeatureKind::Degree { bins } => {
            if bins == 0 {
                return Err(Error::Config("degree feature bins must be >= 1".into()));
            }
            let mut x = Array2::zeros((n, bins));
            for i in 0..n {
                let deg = first.neighbors(i)?.len();
                x[[i, deg.min(bins - 1)]] = 1.0;
            }
            Ok(x)
        }
        FeatureKind::Identity => Ok(Array2::eye(n)),
    }
}
