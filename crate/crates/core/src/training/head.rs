//! Pairwise link head, negative sampling, BCE and MRR.

use std::collections::BTreeSet;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::backbone::glorot;
use crate::error::{Error, Result};
use crate::graph::Snapshot;
use crate::numerics::{sigmoid, ParamId, ParamStore, Tape, Tensor, Var};

/// Two-layer perceptron over `[h_i ‖ h_j]`.
#[derive(Debug, Clone)]
pub struct LinkHead {
    prefix: String,
    input_dim: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl LinkHead {
    pub fn new(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("link head dims must be > 0".into()));
        }
        let w1 = store.add(format!("{prefix}.w1"), glorot(rng, 2 * input_dim, hidden));
        let b1 = store.add(format!("{prefix}.b1"), Array2::zeros((1, hidden)));
        let w2 = store.add(format!("{prefix}.w2"), glorot(rng, hidden, 1));
        let b2 = store.add(format!("{prefix}.b2"), Array2::zeros((1, 1)));
        Ok(LinkHead {
            prefix: prefix.to_string(),
            input_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            store
                .find(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
        };
        let w1 = get("w1")?;
        Ok(LinkHead {
            prefix: prefix.to_string(),
            input_dim: store.get(w1).nrows() / 2,
            w1,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Logits (`P x 1`) for `pairs` over node embeddings `emb`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, emb: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (n, d) = tape.shape(emb);
        if d != self.input_dim {
            return Err(Error::shape("link_scores", format!("embedding width {d}, head expects {}", self.input_dim)));
        }
        if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= n) {
            return Err(Error::Index { index: i.max(j), len: n });
        }
        let src: Rc<[usize]> = pairs.iter().map(|p| p.0).collect();
        let dst: Rc<[usize]> = pairs.iter().map(|p| p.1).collect();
        let hs = tape.gather_rows(emb, src)?;
        let hd = tape.gather_rows(emb, dst)?;
        let x = tape.concat_cols(&[hs, hd])?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    /// Probabilities for `pairs` with no gradient bookkeeping kept.
    pub fn scores(&self, store: &ParamStore, emb: &Tensor, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = tape.constant(emb.clone());
        let l = self.logits(&mut tape, store, e, pairs)?;
        Ok(tape.value(l).iter().map(|&x| sigmoid(x)).collect())
    }
}

/// Positive edges of `future` followed by `per_positive` sampled non-edges per
/// positive that share its source. A source whose every destination is taken
/// falls back to a uniformly drawn non-edge anywhere in the graph.
pub fn sample_training_pairs(
    future: &Snapshot,
    per_positive: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<(usize, usize)>, Tensor)> {
    let n = future.num_nodes();
    let positives: Vec<(usize, usize)> = future.edges().iter().map(|e| (e.src, e.dst)).collect();
    if positives.is_empty() {
        return Err(Error::Data(format!("snapshot {} has no positive edges", future.index())));
    }
    let mut pairs = positives.clone();
    if per_positive > 0 && future.num_edges() >= n * n {
        return Err(Error::Data("graph is complete; no negatives to sample".into()));
    }
    let mut out_deg = vec![0usize; n];
    for &(i, _) in &positives {
        out_deg[i] += 1;
    }
    for &(i, _) in &positives {
        for _ in 0..per_positive {
            let src = if out_deg[i] >= n { None } else { Some(i) };
            let pair = loop {
                let s = src.unwrap_or_else(|| rng.gen_range(0..n));
                let d = rng.gen_range(0..n);
                if !future.contains(s, d) {
                    break (s, d);
                }
            };
            pairs.push(pair);
        }
    }
    let mut labels = Array2::zeros((pairs.len(), 1));
    labels
        .slice_mut(ndarray::s![..positives.len(), ..])
        .fill(1.0);
    Ok((pairs, labels))
}

/// Mean BCE over the positives of `future` and their sampled negatives.
pub fn bce_with_negatives(
    tape: &mut Tape,
    store: &ParamStore,
    head: &LinkHead,
    emb: Var,
    future: &Snapshot,
    per_positive: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (pairs, labels) = sample_training_pairs(future, per_positive, rng)?;
    let logits = head.logits(tape, store, emb, &pairs)?;
    tape.bce_with_logits(logits, Rc::new(labels))
}

/// `1 / (1 + #{negatives >= positive})`: equal scores rank above the positive.
pub fn reciprocal_rank(pos: f64, negs: &[f64]) -> f64 {
    1.0 / (1 + negs.iter().filter(|&&s| s >= pos).count()) as f64
}

/// For every positive `(i, j)` draws `count` corruptions `(i, j')` with `j'`
/// uniform (with replacement) over nodes other than `i` not linked from `i`.
pub fn sample_mrr_candidates(future: &Snapshot, count: usize, rng: &mut impl Rng) -> Result<Vec<((usize, usize), Vec<usize>)>> {
    if future.num_edges() == 0 {
        return Err(Error::Data(format!("snapshot {} has no test edges", future.index())));
    }
    let n = future.num_nodes();
    let mut out = Vec::with_capacity(future.num_edges());
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for e in future.edges() {
        if cached.as_ref().map(|c| c.0) != Some(e.src) {
            let linked: BTreeSet<usize> = future.edges().iter().filter(|x| x.src == e.src).map(|x| x.dst).collect();
            let free: Vec<usize> = (0..n).filter(|&j| j != e.src && !linked.contains(&j)).collect();
            cached = Some((e.src, free));
        }
        let free = &cached.as_ref().expect("filled above").1;
        let negs = if free.is_empty() {
            Vec::new()
        } else {
            (0..count).map(|_| free[rng.gen_range(0..free.len())]).collect()
        };
        out.push(((e.src, e.dst), negs));
    }
    Ok(out)
}

/// MRR of `future`'s edges under `score` to pairs.
pub fn mrr_with<F>(future: &Snapshot, count: usize, rng: &mut impl Rng, score: F) -> Result<f64>
where
    F: Fn(&[(usize, usize)]) -> Result<Vec<f64>>,
{
    let cands = sample_mrr_candidates(future, count, rng)?;
    let mut pairs = Vec::with_capacity(cands.len() * (count + 1));
    for ((i, j), negs) in &cands {
        pairs.push((*i, *j));
        pairs.extend(negs.iter().map(|&k| (*i, k)));
    }
    let scores = score(&pairs)?;
    let mut at = 0;
    let mut total = 0.0;
    for (_, negs) in &cands {
        let pos = scores[at];
        total += reciprocal_rank(pos, &scores[at + 1..at + 1 + negs.len()]);
        at += 1 + negs.len();
    }
    Ok(total / cands.len() as f64)
}

pub fn mrr(
    store: &ParamStore,
    head: &LinkHead,
    emb: &Tensor,
    future: &Snapshot,
    count: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    mrr_with(future, count, rng, |pairs| head.scores(store, emb, pairs))
}
