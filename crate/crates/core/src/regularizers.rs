//! Contrastive consistency (structural) and continuity (temporal) penalties
//! and the weighted training objective.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use log::warn;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainer::{TemporalAttention, TemporalPass};
use crate::graph::Snapshot;
use crate::numerics::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Weight of the consistency term.
    pub alpha: f64,
    /// Weight of the continuity term.
    pub beta: f64,
    pub anchors: usize,
    pub negatives: usize,
    /// Archived steps; `None` means four times the buffer size.
    pub history_capacity: Option<usize>,
    /// Divides similarities inside the exponent.
    pub temperature: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            alpha: 0.1,
            beta: 0.1,
            anchors: 32,
            negatives: 8,
            history_capacity: None,
            temperature: 1.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.alpha, self.beta)?;
        if self.anchors == 0 || self.negatives == 0 {
            return Err(Error::Config("anchors and negatives must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("contrastive temperature must be > 0".into()));
        }
        if self.history_capacity == Some(0) {
            return Err(Error::Config("history_capacity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn history_capacity(&self, buffer_size: usize) -> usize {
        self.history_capacity.unwrap_or(4 * buffer_size)
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0) {
        return Err(Error::Config(format!(
            "need alpha >= 0, beta >= 0, alpha + beta <= 1; got alpha={alpha} beta={beta}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Anchor {
    pub node: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    /// Uniformly samples up to `count` anchors among nodes with an out-edge to
    /// another node, one out-neighbour as the positive and up to `negatives`
    /// distinct non-neighbours.
    pub fn sample(snapshot: &Snapshot, count: usize, negatives: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = snapshot.num_nodes();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in snapshot.edges() {
            if e.src != e.dst {
                out[e.src].push(e.dst);
            }
        }
        let candidates: Vec<usize> = (0..n).filter(|&i| !out[i].is_empty()).collect();
        let take = count.min(candidates.len());
        let mut anchors = Vec::with_capacity(take);
        for pick in sample(rng, candidates.len(), take).into_iter() {
            let i = candidates[pick];
            let positive = out[i][rng.gen_range(0..out[i].len())];
            let near: BTreeSet<usize> = snapshot.neighbors(i)?.iter().copied().collect();
            let free = n - near.len() - usize::from(!near.contains(&i));
            let want = negatives.min(free);
            let mut negs = BTreeSet::new();
            while negs.len() < want {
                let j = rng.gen_range(0..n);
                if j != i && !near.contains(&j) {
                    negs.insert(j);
                }
            }
            let negs: Vec<usize> = negs.into_iter().collect();
            anchors.push(Anchor {
                node: i,
                positive,
                negatives: negs,
            });
        }
        Ok(AnchorSet { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// `-ln(exp(s_pos) / (exp(s_pos) + Σ exp(s_neg)))`.
pub fn contrastive_term(s_pos: f64, s_neg: &[f64]) -> f64 {
    let m = s_neg.iter().copied().fold(s_pos, f64::max);
    let total: f64 = (s_pos - m).exp() + s_neg.iter().map(|s| (s - m).exp()).sum::<f64>();
    m + total.ln() - s_pos
}

/// Mean contrastive term over groups of similarities laid out as
/// `[pos, neg, neg, ..]` per group in `sims` (`P x 1`).
fn grouped_contrastive(tape: &mut Tape, sims: Var, groups: &[usize], temperature: f64) -> Result<Var> {
    let n_groups = groups.len();
    let mut owner = Vec::new();
    let mut pos_rows = Vec::with_capacity(n_groups);
    for (g, &size) in groups.iter().enumerate() {
        pos_rows.push(owner.len());
        owner.extend(std::iter::repeat_n(g, size));
    }
    let s = tape.scale(sims, 1.0 / temperature);
    // cosine similarities are bounded, so the plain exponential cannot overflow
    let e = tape.exp(s)?;
    let totals = tape.scatter_add_rows(e, owner.into(), n_groups)?;
    let lse = tape.ln(totals)?;
    let pos = tape.gather_rows(s, pos_rows.into())?;
    let terms = tape.sub(lse, pos)?;
    Ok(tape.mean(terms))
}

/// Consistency penalty over the dense gate rows of the anchors. `gates` is the
/// `E x 1` gate column of `snapshot`.
pub fn consistency_loss(
    tape: &mut Tape,
    gates: Var,
    snapshot: &Snapshot,
    anchors: &AnchorSet,
    temperature: f64,
) -> Result<Var> {
    if tape.shape(gates) != (snapshot.num_edges(), 1) {
        return Err(Error::shape(
            "consistency_loss",
            format!("{:?} gates for {} edges", tape.shape(gates), snapshot.num_edges()),
        ));
    }
    let valid: Vec<&Anchor> = anchors
        .anchors
        .iter()
        .filter(|a| {
            let ok = a.positive != a.node && snapshot.contains(a.node, a.positive) && !a.negatives.is_empty();
            if !ok {
                warn!("skipping anchor {} without a valid positive", a.node);
            }
            ok
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::Data("consistency_loss: every anchor was skipped".into()));
    }
    for a in &valid {
        if let Some(j) = a.negatives.iter().find(|&&j| snapshot.contains(a.node, j)) {
            return Err(Error::Data(format!("anchor {} has connected negative {j}", a.node)));
        }
    }

    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for a in &valid {
        for v in std::iter::once(a.node).chain([a.positive]).chain(a.negatives.iter().copied()) {
            let next = rows.len();
            rows.entry(v).or_insert(next);
        }
    }
    let n = snapshot.num_nodes();
    let map: Rc<[_]> = snapshot
        .edges()
        .iter()
        .enumerate()
        .filter_map(|(p, e)| rows.get(&e.src).map(|&r| ((r, e.dst), (p, 0))))
        .collect();
    let dense = tape.place(gates, (rows.len(), n), map)?;

    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut groups = Vec::new();
    for a in &valid {
        for other in std::iter::once(a.positive).chain(a.negatives.iter().copied()) {
            left.push(rows[&a.node]);
            right.push(rows[&other]);
        }
        groups.push(1 + a.negatives.len());
    }
    let l = tape.gather_rows(dense, left.into())?;
    let r = tape.gather_rows(dense, right.into())?;
    let sims = tape.cosine_rows(l, r)?;
    grouped_contrastive(tape, sims, &groups, temperature)
}

/// Flattens a `Bc x Bc` matrix into a length-`B²` row, zero-padded so the
/// newest step sits in the bottom-right corner.
pub fn pad_flatten(m: &Array2<f64>, b: usize) -> Result<Vec<f64>> {
    let bc = m.nrows();
    if bc > b || m.ncols() != bc {
        return Err(Error::shape("pad_flatten", format!("{:?} into {b}x{b}", m.dim())));
    }
    let off = b - bc;
    let mut out = vec![0.0; b * b];
    for ((r, c), &v) in m.indexed_iter() {
        out[(off + r) * b + off + c] = v;
    }
    Ok(out)
}

/// Archive of padded, flattened temporal attention of a fixed node set.
#[derive(Debug, Clone)]
pub struct AttentionHistory {
    capacity: usize,
    width: usize,
    entries: VecDeque<(usize, BTreeMap<usize, Vec<f64>>)>,
}

impl AttentionHistory {
    /// `width` is the configured buffer size `B`.
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config("history capacity and width must be >= 1".into()));
        }
        Ok(AttentionHistory {
            capacity,
            width,
            entries: VecDeque::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn archive(&mut self, step: usize, att: &TemporalAttention, nodes: &[usize]) -> Result<()> {
        let mut per = BTreeMap::new();
        for &i in nodes {
            per.insert(i, pad_flatten(&att.node(i), self.width)?);
        }
        self.insert(step, per);
        Ok(())
    }

    pub fn insert(&mut self, step: usize, per_node: BTreeMap<usize, Vec<f64>>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((step, per_node));
    }

    pub fn get(&self, step: usize, node: usize) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(s, _)| *s == step)
            .and_then(|(_, m)| m.get(&node))
            .map(Vec::as_slice)
    }
}

/// Picks the positive step and negative steps for `current`: the newest
/// archived step inside the sliding window `(current - window, current)` and
/// every archived step that has left the buffer (`<= current - buffer`).
pub fn continuity_pairs(history: &AttentionHistory, current: usize, window: usize, buffer: usize) -> (Option<usize>, Vec<usize>) {
    let steps = history.steps();
    let positive = steps
        .iter()
        .copied()
        .filter(|&s| s < current && current - s < window)
        .max();
    let negatives = steps
        .iter()
        .copied()
        .filter(|&s| s + buffer <= current)
        .collect();
    (positive, negatives)
}

/// Continuity penalty for `nodes` at step `current`. Returns `None` (and
/// logs) when the history cannot supply a positive and a negative yet.
#[allow(clippy::too_many_arguments)]
pub fn continuity_loss(
    tape: &mut Tape,
    pass: &TemporalPass,
    nodes: &[usize],
    history: &AttentionHistory,
    current: usize,
    window: usize,
    temperature: f64,
) -> Result<Option<Var>> {
    let b = history.width();
    let (positive, negatives) = continuity_pairs(history, current, window, b);
    let Some(positive) = positive else {
        warn!("continuity: no positive step in window at step {current}");
        return Ok(None);
    };
    if negatives.is_empty() {
        warn!("continuity: history has no step outside the buffer at step {current}");
        return Ok(None);
    }
    let bc = pass.attention.len();
    if bc > b {
        return Err(Error::shape("continuity_loss", format!("{bc} steps exceed width {b}")));
    }
    let off = b - bc;
    let row_of: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut current_flat: Option<Var> = None;
    for (k, &att) in pass.attention.iter().enumerate() {
        let map: Rc<[_]> = nodes
            .iter()
            .enumerate()
            .flat_map(|(r, &i)| (0..bc).map(move |j| ((r, (off + k) * b + off + j), (i, j))))
            .collect();
        let placed = tape.place(att, (nodes.len(), b * b), map)?;
        current_flat = Some(match current_flat {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let current_flat = current_flat.expect("non-empty pass");

    let mut left = Vec::new();
    let mut others: Vec<f64> = Vec::new();
    let mut groups = Vec::new();
    for &i in nodes {
        let Some(pos) = history.get(positive, i) else { continue };
        let negs: Vec<&[f64]> = negatives.iter().filter_map(|&s| history.get(s, i)).collect();
        if negs.is_empty() {
            continue;
        }
        for m in std::iter::once(pos).chain(negs.iter().copied()) {
            left.push(row_of[&i]);
            others.extend_from_slice(m);
        }
        groups.push(1 + negs.len());
    }
    if groups.is_empty() {
        warn!("continuity: no sampled node has archived attention at step {current}");
        return Ok(None);
    }
    let rows = left.len();
    let l = tape.gather_rows(current_flat, left.into())?;
    let r = tape.constant(Array2::from_shape_vec((rows, b * b), others).expect("flattened rows"));
    let sims = tape.cosine_rows(l, r)?;
    grouped_contrastive(tape, sims, &groups, temperature).map(Some)
}

/// `(1−α−β)·l_ce + α·l_cons + β·l_cont`; missing terms count as 0.
pub fn total_loss(tape: &mut Tape, ce: Var, cons: Option<Var>, cont: Option<Var>, alpha: f64, beta: f64) -> Result<Var> {
    check_weights(alpha, beta)?;
    let mut out = tape.scale(ce, 1.0 - alpha - beta);
    for (term, w) in [(cons, alpha), (cont, beta)] {
        if let Some(t) = term {
            if w != 0.0 {
                let s = tape.scale(t, w);
                out = tape.add(out, s)?;
            }
        }
    }
    Ok(out)
}

pub fn total_loss_value(ce: f64, cons: f64, cont: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_weights(alpha, beta)?;
    Ok((1.0 - alpha - beta) * ce + alpha * cons + beta * cont)
}
