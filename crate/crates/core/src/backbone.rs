//! Recurrent snapshot encoder: stacked sum-aggregation message passing with a
//! GRU state update after every layer, plus the FIFO embedding buffer.

use std::collections::VecDeque;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Snapshot;
use crate::numerics::{ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub aggregation: Aggregation,
    pub skip_connections: bool,
    /// L2-normalise node rows after each message-passing layer.
    pub row_normalize: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_layers: 2,
            hidden_dim: 128,
            aggregation: Aggregation::Sum,
            skip_connections: true,
            row_normalize: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("backbone hidden_dim must be > 0".into()));
        }
        if !(1..=4).contains(&self.num_layers) {
            return Err(Error::Config(format!(
                "backbone num_layers must be in 1..=4, got {}",
                self.num_layers
            )));
        }
        Ok(())
    }
}

pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Symmetrised 0/1 adjacency of a snapshot as a sparse matrix.
pub fn sym_adjacency(snapshot: &Snapshot) -> Rc<SparseMatrix> {
    let n = snapshot.num_nodes();
    let mut entries = Vec::new();
    for i in 0..n {
        for &j in snapshot.neighbors(i).expect("node in range") {
            entries.push((i, j, 1.0));
        }
    }
    Rc::new(SparseMatrix {
        rows: n,
        cols: n,
        entries,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w_self: Var,
    pub w_nbr: Var,
}

/// `relu(H·W_self + A_sym·H·W_nbr)`, plus `H` when `skip` and the widths match.
pub fn gnn_layer(
    tape: &mut Tape,
    h_in: Var,
    adj: &Rc<SparseMatrix>,
    w: LayerVars,
    skip: bool,
) -> Result<Var> {
    if tape.shape(h_in).0 != adj.rows {
        return Err(Error::shape(
            "gnn_layer",
            format!("{} rows vs {} nodes", tape.shape(h_in).0, adj.rows),
        ));
    }
    let own = tape.matmul(h_in, w.w_self)?;
    let agg = tape.spmm(Rc::clone(adj), h_in)?;
    let msg = tape.matmul(agg, w.w_nbr)?;
    let pre = tape.add(own, msg)?;
    let out = tape.relu(pre);
    if skip && tape.shape(out) == tape.shape(h_in) {
        tape.add(out, h_in)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wc: Var,
    pub uc: Var,
    pub bc: Var,
}

/// Row-wise GRU cell: `(1−z)⊙H_prev + z⊙tanh(X·Wc + (r⊙H_prev)·Uc + bc)`.
pub fn gru_update(tape: &mut Tape, x: Var, h_prev: Var, g: GruVars) -> Result<Var> {
    if tape.shape(x) != tape.shape(h_prev) {
        return Err(Error::shape(
            "gru_update",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(h_prev)),
        ));
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let a = tape.matmul(x, w)?;
        let c = tape.matmul(h, u)?;
        let s = tape.add(a, c)?;
        tape.add_row(s, b)
    };
    let z = gate(tape, g.wz, g.uz, g.bz, h_prev)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, g.wr, g.ur, g.br, h_prev)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, g.wc, g.uc, g.bc, rh)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

#[derive(Debug, Clone)]
struct LayerIds {
    w_self: ParamId,
    w_nbr: ParamId,
}

const GRU_NAMES: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc"];

#[derive(Debug, Clone)]
struct GruIds {
    ids: [ParamId; 9],
}

/// Hierarchical node state: one `N x F` matrix per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub layers: Vec<Tensor>,
}

impl NodeState {
    pub fn zeros(num_layers: usize, n: usize, f: usize) -> Self {
        NodeState {
            layers: vec![Array2::zeros((n, f)); num_layers],
        }
    }

    pub fn top(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

/// Tape outputs of one snapshot encoding.
pub struct Encoded {
    pub layers: Vec<Var>,
    pub top: Var,
}

impl Encoded {
    pub fn state(&self, tape: &Tape) -> NodeState {
        NodeState {
            layers: self.layers.iter().map(|v| tape.value(*v).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    input_dim: usize,
    layers: Vec<LayerIds>,
    grus: Vec<GruIds>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        config: BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let f = config.hidden_dim;
        let mut layers = Vec::new();
        let mut grus = Vec::new();
        for l in 0..config.num_layers {
            let fin = if l == 0 { input_dim } else { f };
            layers.push(LayerIds {
                w_self: store.add(format!("backbone.layer{l}.w_self"), glorot(rng, fin, f)),
                w_nbr: store.add(format!("backbone.layer{l}.w_nbr"), glorot(rng, fin, f)),
            });
            let ids: Vec<ParamId> = GRU_NAMES
                .iter()
                .map(|name| {
                    let value = if name.starts_with('b') {
                        Array2::zeros((1, f))
                    } else {
                        glorot(rng, f, f)
                    };
                    store.add(format!("backbone.gru{l}.{name}"), value)
                })
                .collect();
            grus.push(GruIds {
                ids: ids.try_into().expect("nine gru parameters"),
            });
        }
        Ok(Backbone {
            config,
            input_dim,
            layers,
            grus,
        })
    }

    /// Re-binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn from_store(store: &ParamStore, input_dim: usize, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let get = |name: String| {
            store
                .find(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
        };
        let mut layers = Vec::new();
        let mut grus = Vec::new();
        for l in 0..config.num_layers {
            layers.push(LayerIds {
                w_self: get(format!("backbone.layer{l}.w_self"))?,
                w_nbr: get(format!("backbone.layer{l}.w_nbr"))?,
            });
            let ids = GRU_NAMES
                .iter()
                .map(|n| get(format!("backbone.gru{l}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            grus.push(GruIds {
                ids: ids.try_into().expect("nine gru parameters"),
            });
        }
        Ok(Backbone {
            config,
            input_dim,
            layers,
            grus,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (l, g) in self.layers.iter().zip(&self.grus) {
            out.push(l.w_self);
            out.push(l.w_nbr);
            out.extend_from_slice(&g.ids);
        }
        out
    }

    pub fn initial_state(&self, n: usize) -> NodeState {
        NodeState::zeros(self.config.num_layers, n, self.config.hidden_dim)
    }

    /// Message-pass then GRU-update per layer against the previous state
    /// (treated as a constant). The top layer is `H^(t)`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        state: &NodeState,
        snapshot: &Snapshot,
        adj: &Rc<SparseMatrix>,
    ) -> Result<Encoded> {
        if state.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "encode_snapshot",
                format!("state has {} layers, model {}", state.layers.len(), self.layers.len()),
            ));
        }
        if snapshot.features().ncols() != self.input_dim {
            return Err(Error::shape(
                "encode_snapshot",
                format!(
                    "features have {} columns, backbone expects {}",
                    snapshot.features().ncols(),
                    self.input_dim
                ),
            ));
        }
        let mut h = tape.constant(snapshot.features().clone());
        let mut new_layers = Vec::with_capacity(self.layers.len());
        for ((ids, gids), prev) in self.layers.iter().zip(&self.grus).zip(&state.layers) {
            let w = LayerVars {
                w_self: tape.param(store, ids.w_self),
                w_nbr: tape.param(store, ids.w_nbr),
            };
            let mut out = gnn_layer(tape, h, adj, w, self.config.skip_connections)?;
            if self.config.row_normalize {
                out = tape.row_normalize(out, 1e-12);
            }
            let p = |tape: &mut Tape, k: usize| tape.param(store, gids.ids[k]);
            let g = GruVars {
                wz: p(tape, 0),
                uz: p(tape, 1),
                bz: p(tape, 2),
                wr: p(tape, 3),
                ur: p(tape, 4),
                br: p(tape, 5),
                wc: p(tape, 6),
                uc: p(tape, 7),
                bc: p(tape, 8),
            };
            let prev = tape.constant(prev.clone());
            h = gru_update(tape, out, prev, g)?;
            new_layers.push(h);
        }
        Ok(Encoded {
            top: h,
            layers: new_layers,
        })
    }
}

/// FIFO of the most recent top-layer embeddings, oldest first.
#[derive(Debug, Clone)]
pub struct EmbeddingBuffer {
    capacity: usize,
    entries: VecDeque<(usize, Arc<Tensor>)>,
}

impl EmbeddingBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer size must be >= 1".into()));
        }
        Ok(EmbeddingBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the embedding of snapshot `t`, evicting the oldest one when full.
    pub fn push(&mut self, t: usize, h: Tensor) -> Result<()> {
        if let Some((_, first)) = self.entries.front() {
            if first.nrows() != h.nrows() {
                return Err(Error::shape(
                    "buffer_push",
                    format!("{} rows, buffer holds {}", h.nrows(), first.nrows()),
                ));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, Arc::new(h)));
        Ok(())
    }

    /// `(snapshot ordinal, embedding)` pairs, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries.iter().map(|(t, h)| (*t, h.as_ref()))
    }

    pub fn ordinals(&self) -> Vec<usize> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn latest(&self) -> Option<(usize, &Tensor)> {
        self.entries.back().map(|(t, h)| (*t, h.as_ref()))
    }
}
