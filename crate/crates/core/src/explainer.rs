//! Structural hard attention over each snapshot's edges and temporal attention
//! over the buffered snapshots of every node.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::glorot;
use crate::error::{Error, Result};
use crate::graph::Snapshot;
use crate::numerics::{GateParams, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_SLOPE};

/// Which buffered steps row `k` may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMask {
    /// Every `j <= k`.
    #[default]
    Causal,
    /// `k - width < j <= k`.
    Window { width: usize },
    /// Only `j == k`.
    SelfOnly,
}

impl TemporalMask {
    pub fn build(&self, b: usize) -> Result<Array2<bool>> {
        if let TemporalMask::Window { width: 0 } = self {
            return Err(Error::Config("temporal window width must be >= 1".into()));
        }
        Ok(Array2::from_shape_fn((b, b), |(k, j)| match *self {
            TemporalMask::Causal => j <= k,
            TemporalMask::Window { width } => j <= k && k - j < width,
            TemporalMask::SelfOnly => j == k,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainerConfig {
    pub structural_dim: usize,
    pub temporal_dim: usize,
    /// Stretch interval; `tau` here is overridden by the annealing schedule during training.
    pub gate: GateParams,
    /// Replace hard gates with a per-source softmax (ablation).
    pub structural_softmax: bool,
    /// Pin every gate to 1.
    pub force_open_gates: bool,
    pub temporal_mask: TemporalMask,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            structural_dim: 16,
            temporal_dim: 16,
            gate: GateParams::default(),
            structural_softmax: false,
            force_open_gates: false,
            temporal_mask: TemporalMask::Causal,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.structural_dim == 0 || self.temporal_dim == 0 {
            return Err(Error::Config("explainer dims must be > 0".into()));
        }
        self.gate.validate()?;
        self.temporal_mask.build(1)?;
        Ok(())
    }
}

/// How edge logits turn into edge weights for one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gating<'a> {
    /// Binary-concrete sample with the given frozen noise (one entry per edge).
    Sampled { noise: &'a Tensor, params: GateParams },
    Deterministic(GateParams),
    Open,
    Softmax,
}

/// Per-edge gates of one snapshot, in the snapshot's edge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralAttention {
    pub snapshot: usize,
    pub edges: Vec<(usize, usize)>,
    pub gates: Vec<f64>,
    pub logits: Vec<f64>,
}

impl StructuralAttention {
    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.edges
            .binary_search(&(src, dst))
            .map_or(0.0, |p| self.gates[p])
    }

    pub fn to_dense(&self, n: usize) -> Tensor {
        let mut out = Array2::zeros((n, n));
        for (&(i, j), &g) in self.edges.iter().zip(&self.gates) {
            out[[i, j]] = g;
        }
        out
    }
}

/// Per-node `Bc x Bc` attention over the buffered steps (`Bc` = buffer fill).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttention {
    /// Snapshot ordinals of the buffered steps, oldest first.
    pub ordinals: Vec<usize>,
    pub mask: Array2<bool>,
    /// `(node, row, col)`.
    pub weights: Array3<f64>,
}

impl TemporalAttention {
    pub fn steps(&self) -> usize {
        self.ordinals.len()
    }

    pub fn node(&self, i: usize) -> Tensor {
        self.weights
            .index_axis(ndarray::Axis(0), i)
            .to_owned()
    }

    /// Attention of the last row averaged over all nodes.
    pub fn mean_last_row(&self) -> Vec<f64> {
        let b = self.steps();
        let n = self.weights.shape()[0].max(1) as f64;
        (0..b)
            .map(|j| {
                (0..self.weights.shape()[0])
                    .map(|i| self.weights[[i, b - 1, j]])
                    .sum::<f64>()
                    / n
            })
            .collect()
    }
}

/// Tape handles of one structural pass.
#[derive(Debug, Clone, Copy)]
pub struct StructuralPass {
    pub projected: Var,
    pub logits: Var,
    pub gates: Var,
    pub aggregated: Var,
}

/// Tape handles of one temporal pass; `attention[k]` is row `k` for all nodes (`N x Bc`).
#[derive(Debug, Clone)]
pub struct TemporalPass {
    pub attention: Vec<Var>,
    pub outputs: Vec<Var>,
    pub mask: Array2<bool>,
}

impl TemporalPass {
    pub fn last_output(&self) -> Var {
        *self.outputs.last().expect("non-empty buffer")
    }

    pub fn values(&self, tape: &Tape, ordinals: Vec<usize>) -> TemporalAttention {
        let b = self.attention.len();
        let n = tape.shape(self.attention[0]).0;
        let mut w = Array3::zeros((n, b, b));
        for (k, a) in self.attention.iter().enumerate() {
            let v = tape.value(*a);
            for i in 0..n {
                for j in 0..b {
                    w[[i, k, j]] = v[[i, j]];
                }
            }
        }
        TemporalAttention {
            ordinals,
            mask: self.mask.clone(),
            weights: w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Explainer {
    config: ExplainerConfig,
    input_dim: usize,
    ws: ParamId,
    a_src: ParamId,
    a_dst: ParamId,
    wt: ParamId,
    a_query: ParamId,
    a_key: ParamId,
}

const NAMES: [&str; 6] = [
    "explainer.structural.w",
    "explainer.structural.a_src",
    "explainer.structural.a_dst",
    "explainer.temporal.w",
    "explainer.temporal.a_query",
    "explainer.temporal.a_key",
];

impl Explainer {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        config: ExplainerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (fs, k) = (config.structural_dim, config.temporal_dim);
        let shapes = [(input_dim, fs), (fs, 1), (fs, 1), (fs, k), (k, 1), (k, 1)];
        let ids: Vec<ParamId> = NAMES
            .iter()
            .zip(shapes)
            .map(|(name, (r, c))| store.add(*name, glorot(rng, r, c)))
            .collect();
        Ok(Self::bind(config, input_dim, &ids))
    }

    pub fn from_store(store: &ParamStore, input_dim: usize, config: ExplainerConfig) -> Result<Self> {
        config.validate()?;
        let ids = NAMES
            .iter()
            .map(|n| {
                store
                    .find(n)
                    .ok_or_else(|| Error::Data(format!("missing parameter {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::bind(config, input_dim, &ids))
    }

    fn bind(config: ExplainerConfig, input_dim: usize, ids: &[ParamId]) -> Self {
        Explainer {
            config,
            input_dim,
            ws: ids[0],
            a_src: ids[1],
            a_dst: ids[2],
            wt: ids[3],
            a_query: ids[4],
            a_key: ids[5],
        }
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.temporal_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.ws, self.a_src, self.a_dst, self.wt, self.a_query, self.a_key]
    }

    pub fn structural_param_ids(&self) -> [ParamId; 3] {
        [self.ws, self.a_src, self.a_dst]
    }

    pub fn temporal_param_ids(&self) -> [ParamId; 3] {
        [self.wt, self.a_query, self.a_key]
    }

    /// Gating for a training pass (`noise` present) or a reported explanation.
    pub fn gating<'a>(&self, noise: Option<&'a Tensor>, tau: f64) -> Gating<'a> {
        if self.config.force_open_gates {
            Gating::Open
        } else if self.config.structural_softmax {
            Gating::Softmax
        } else {
            let params = self.config.gate.with_tau(tau);
            match noise {
                Some(noise) => Gating::Sampled { noise, params },
                None => Gating::Deterministic(params),
            }
        }
    }

    /// `(Z, ω)` with `Z = H·W_s` and `ω_e = leaky(a_src·z_src + a_dst·z_dst)` per edge.
    pub fn structural_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        snapshot: &Snapshot,
    ) -> Result<(Var, Var)> {
        let (rows, cols) = tape.shape(h);
        if rows != snapshot.num_nodes() || cols != self.input_dim {
            return Err(Error::shape(
                "structural_logits",
                format!(
                    "embeddings {rows}x{cols}, expected {}x{}",
                    snapshot.num_nodes(),
                    self.input_dim
                ),
            ));
        }
        let ws = tape.param(store, self.ws);
        let z = tape.matmul(h, ws)?;
        let a_src = tape.param(store, self.a_src);
        let a_dst = tape.param(store, self.a_dst);
        let s_src = tape.matmul(z, a_src)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let (src, dst) = edge_index(snapshot);
        let es = tape.gather_rows(s_src, src)?;
        let ed = tape.gather_rows(s_dst, dst)?;
        let pre = tape.add(es, ed)?;
        Ok((z, tape.leaky_relu(pre, LEAKY_SLOPE)))
    }

    pub fn structural_attention(
        &self,
        tape: &mut Tape,
        logits: Var,
        snapshot: &Snapshot,
        gating: Gating<'_>,
    ) -> Result<Var> {
        let e = tape.shape(logits).0;
        match gating {
            Gating::Sampled { noise, params } => {
                if noise.dim() != (e, 1) {
                    return Err(Error::shape(
                        "structural_attention",
                        format!("noise {:?} for {e} edges", noise.dim()),
                    ));
                }
                tape.concrete_gate(logits, noise, &params)
            }
            Gating::Deterministic(params) => Ok(tape.deterministic_gate(logits, &params)),
            Gating::Open => Ok(tape.constant(Array2::ones((e, 1)))),
            Gating::Softmax => {
                let (src, _) = edge_index(snapshot);
                tape.segment_softmax(logits, src)
            }
        }
    }

    /// `H̃_i = relu(Σ_{(i,j)∈E} g_ij · z_j)`.
    pub fn structural_aggregate(
        &self,
        tape: &mut Tape,
        projected: Var,
        gates: Var,
        snapshot: &Snapshot,
    ) -> Result<Var> {
        if tape.shape(gates).0 != snapshot.num_edges() {
            return Err(Error::shape(
                "structural_aggregate",
                format!("{} gates for {} edges", tape.shape(gates).0, snapshot.num_edges()),
            ));
        }
        let (src, dst) = edge_index(snapshot);
        let zd = tape.gather_rows(projected, dst)?;
        let msg = tape.mul_col(zd, gates)?;
        let agg = tape.scatter_add_rows(msg, src, snapshot.num_nodes())?;
        Ok(tape.relu(agg))
    }

    pub fn structural(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        snapshot: &Snapshot,
        gating: Gating<'_>,
    ) -> Result<StructuralPass> {
        let (projected, logits) = self.structural_logits(tape, store, h, snapshot)?;
        let gates = self.structural_attention(tape, logits, snapshot, gating)?;
        let aggregated = self.structural_aggregate(tape, projected, gates, snapshot)?;
        Ok(StructuralPass {
            projected,
            logits,
            gates,
            aggregated,
        })
    }

    /// Batched temporal attention and aggregation over a stack of `N x F'`
    /// embeddings (oldest first) under `mask` (`Bc x Bc`).
    pub fn temporal(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stack: &[Var],
        mask: &Array2<bool>,
    ) -> Result<TemporalPass> {
        let b = stack.len();
        if b == 0 {
            return Err(Error::shape("temporal_attention", "empty buffer"));
        }
        if mask.dim() != (b, b) {
            return Err(Error::shape(
                "temporal_attention",
                format!("mask {:?} for {b} steps", mask.dim()),
            ));
        }
        let n = tape.shape(stack[0]).0;
        let wt = tape.param(store, self.wt);
        let aq = tape.param(store, self.a_query);
        let ak = tape.param(store, self.a_key);
        let mut ys = Vec::with_capacity(b);
        let mut queries = Vec::with_capacity(b);
        let mut keys = Vec::with_capacity(b);
        for &h in stack {
            if tape.shape(h) != (n, self.config.structural_dim) {
                return Err(Error::shape(
                    "temporal_attention",
                    format!("step shape {:?}", tape.shape(h)),
                ));
            }
            let y = tape.matmul(h, wt)?;
            queries.push(tape.matmul(y, aq)?);
            keys.push(tape.matmul(y, ak)?);
            ys.push(y);
        }
        let key_mat = tape.concat_cols(&keys)?;
        let mut attention = Vec::with_capacity(b);
        let mut outputs = Vec::with_capacity(b);
        for k in 0..b {
            let pre = tape.add_col(key_mat, queries[k])?;
            let scores = tape.leaky_relu(pre, LEAKY_SLOPE);
            let row_mask = Array2::from_shape_fn((n, b), |(_, j)| mask[[k, j]]);
            let att = tape.masked_softmax(scores, &row_mask)?;
            let mut acc: Option<Var> = None;
            for j in (0..b).filter(|&j| mask[[k, j]]) {
                let map: Rc<[_]> = (0..n).map(|r| ((r, 0), (r, j))).collect();
                let col = tape.place(att, (n, 1), map)?;
                let term = tape.mul_col(ys[j], col)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            let sum = acc.expect("mask rows are non-empty");
            outputs.push(tape.relu(sum));
            attention.push(att);
        }
        Ok(TemporalPass {
            attention,
            outputs,
            mask: mask.clone(),
        })
    }
}

/// Edge source and destination index columns in snapshot order.
pub fn edge_index(snapshot: &Snapshot) -> (Rc<[usize]>, Rc<[usize]>) {
    let src = snapshot.edges().iter().map(|e| e.src).collect();
    let dst = snapshot.edges().iter().map(|e| e.dst).collect();
    (src, dst)
}

pub fn structural_values(tape: &Tape, pass: &StructuralPass, snapshot: &Snapshot) -> StructuralAttention {
    StructuralAttention {
        snapshot: snapshot.index(),
        edges: snapshot.edges().iter().map(|e| (e.src, e.dst)).collect(),
        gates: tape.value(pass.gates).iter().copied().collect(),
        logits: tape.value(pass.logits).iter().copied().collect(),
    }
}
