use std::time::Instant;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::head::{bce_with_negatives, mrr};
use super::{stream, Model, TrainConfig};
use crate::backbone::{sym_adjacency, EmbeddingBuffer, NodeState};
use crate::error::{Error, Result};
use crate::explainer::{structural_values, StructuralAttention, StructuralPass, TemporalAttention, TemporalMask, TemporalPass};
use crate::graph::{DynamicGraph, Snapshot};
use crate::numerics::{temperature_at, Sgd, Tape, Tensor, Var};
use crate::regularizers::{consistency_loss, continuity_loss, total_loss, AnchorSet, AttentionHistory, RegularizerConfig};

/// One row of the metrics stream; `snapshot` is the predicted snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub snapshot: usize,
    pub mrr: Option<f64>,
    pub backbone_loss: Option<f64>,
    pub backbone_epochs: usize,
    pub ce: Option<f64>,
    pub cons: Option<f64>,
    pub cont: Option<f64>,
    pub total: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Evaluate,
    TrainBackbone,
    FineTune,
}

/// Instrumentation: which labels had been used when a phase ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhaseEvent {
    pub step: usize,
    pub phase: Phase,
    pub target: usize,
    /// Newest snapshot whose edges had served as training labels beforehand.
    pub labels_seen: Option<usize>,
}

/// Deterministic explanation recorded after the fine-tuning of a step.
#[derive(Debug, Clone)]
pub struct StepExplanation {
    pub step: usize,
    pub structural: StructuralAttention,
    pub temporal: TemporalAttention,
}

/// Mutable training state carried from step to step.
#[derive(Debug, Clone)]
pub struct Session {
    pub state: NodeState,
    pub buffer: EmbeddingBuffer,
    pub history: AttentionHistory,
    pub continuity_nodes: Vec<usize>,
    pub labels_seen: Option<usize>,
}

impl Session {
    pub fn new(model: &Model, num_nodes: usize, train: &TrainConfig, reg: &RegularizerConfig) -> Result<Self> {
        let mut rng = stream(train.seed, "continuity-nodes", 0, 0);
        let take = reg.anchors.min(num_nodes);
        let mut nodes: Vec<usize> = sample(&mut rng, num_nodes, take).into_vec();
        nodes.sort_unstable();
        Ok(Session {
            state: model.backbone.initial_state(num_nodes),
            buffer: EmbeddingBuffer::new(train.buffer_size)?,
            history: AttentionHistory::new(reg.history_capacity(train.buffer_size), train.buffer_size)?,
            continuity_nodes: nodes,
            labels_seen: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LiveUpdate {
    pub records: Vec<MetricsRecord>,
    pub events: Vec<PhaseEvent>,
    pub explanations: Vec<StepExplanation>,
    /// Wall seconds per step, kept apart from the metrics so those stay reproducible.
    pub timings: Vec<f64>,
    pub session: Session,
}

/// Mean MRR over the most recent 60% of records that have one.
pub fn headline_mrr(records: &[MetricsRecord]) -> Option<f64> {
    let keep = (records.len() as f64 * 0.6).ceil() as usize;
    let vals: Vec<f64> = records[records.len() - keep..].iter().filter_map(|r| r.mrr).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Tape handles of a full explainer forward over buffered embeddings.
pub struct ExplainForward {
    pub structural: Vec<StructuralPass>,
    pub temporal: TemporalPass,
    pub output: Var,
}

/// Structural pass on every buffered snapshot (oldest first), then temporal
/// attention over the aggregated stack. `noise` holds one column per entry
/// for sampled gating; `None` gives the deterministic explanation.
/// `latest_override` replaces the newest entry's snapshot (masked graphs).
pub fn explain_forward(
    tape: &mut Tape,
    model: &Model,
    graph: &DynamicGraph,
    entries: &[(usize, &Tensor)],
    noise: Option<&[Tensor]>,
    tau: f64,
    latest_override: Option<&Snapshot>,
) -> Result<ExplainForward> {
    if entries.is_empty() {
        return Err(Error::shape("explain_forward", "empty buffer"));
    }
    let mut structural = Vec::with_capacity(entries.len());
    let mut stack = Vec::with_capacity(entries.len());
    for (k, &(ord, h)) in entries.iter().enumerate() {
        let snapshot = match latest_override {
            Some(s) if k + 1 == entries.len() => s,
            _ => graph.at(ord)?,
        };
        let hv = tape.constant(h.clone());
        let gating = model.explainer.gating(noise.map(|n| &n[k]), tau);
        let pass = model.explainer.structural(tape, &model.store, hv, snapshot, gating)?;
        stack.push(pass.aggregated);
        structural.push(pass);
    }
    let mask = model.explainer.config().temporal_mask.build(entries.len())?;
    let temporal = model.explainer.temporal(tape, &model.store, &stack, &mask)?;
    Ok(ExplainForward {
        output: temporal.last_output(),
        structural,
        temporal,
    })
}

fn window_of(mask: TemporalMask, buffer: usize) -> usize {
    match mask {
        TemporalMask::Causal => buffer,
        TemporalMask::Window { width } => width.min(buffer),
        TemporalMask::SelfOnly => 1,
    }
}

fn gate_noise(rng: &mut impl Rng, edges: usize) -> Tensor {
    Array2::from_shape_fn((edges, 1), |_| rng.gen_range(f64::EPSILON..1.0))
}

/// Stops once `patience` consecutive epochs fail to beat the best loss.
struct EarlyStop {
    best: f64,
    wait: usize,
    patience: usize,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            wait: 0,
            patience,
        }
    }

    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }
}

/// Trains the backbone on `snapshot`'s encoding against `future`'s edges with
/// early stopping on the training loss. Returns `(last loss, epochs run)`.
fn train_backbone(
    model: &mut Model,
    state: &NodeState,
    snapshot: &Snapshot,
    future: &Snapshot,
    train: &TrainConfig,
    step: usize,
) -> Result<(f64, usize)> {
    let adj = sym_adjacency(snapshot);
    let params = model.backbone_params();
    let mut opt = Sgd::new(train.backbone_lr, train.momentum);
    let mut stop = EarlyStop::new(train.early_stop_patience);
    let mut last = f64::NAN;
    let mut epochs = 0;
    while epochs < train.max_backbone_epochs {
        let mut rng = stream(train.seed, "backbone-negatives", step as u64, epochs as u64);
        let mut tape = Tape::new();
        let enc = model.backbone.encode(&mut tape, &model.store, state, snapshot, &adj)?;
        let loss = bce_with_negatives(
            &mut tape,
            &model.store,
            &model.backbone_head,
            enc.top,
            future,
            train.negative_samples_per_positive,
            &mut rng,
        )?;
        last = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        opt.step_params(&mut model.store, &grads, &params);
        epochs += 1;
        if stop.observe(last) {
            break;
        }
    }
    Ok((last, epochs))
}

fn encode_values(model: &Model, state: &NodeState, snapshot: &Snapshot) -> Result<NodeState> {
    let mut tape = Tape::new();
    let enc = model
        .backbone
        .encode(&mut tape, &model.store, state, snapshot, &sym_adjacency(snapshot))?;
    Ok(enc.state(&tape))
}

struct FineTuneLosses {
    ce: f64,
    cons: Option<f64>,
    cont: Option<f64>,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn fine_tune_epoch(
    model: &mut Model,
    session: &Session,
    graph: &DynamicGraph,
    future: &Snapshot,
    train: &TrainConfig,
    reg: &RegularizerConfig,
    opt: &mut Sgd,
    step: usize,
    epoch: usize,
) -> Result<FineTuneLosses> {
    let tau = temperature_at(epoch, train.explainer_epochs, train.tau_start, train.tau_end);
    let entries: Vec<(usize, &Tensor)> = session.buffer.entries().collect();
    let mut noise_rng = stream(train.seed, "gate-noise", step as u64, epoch as u64);
    let noise: Vec<Tensor> = entries
        .iter()
        .map(|(ord, _)| graph.at(*ord).map(|s| gate_noise(&mut noise_rng, s.num_edges())))
        .collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let fwd = explain_forward(&mut tape, model, graph, &entries, Some(&noise), tau, None)?;

    let latest = graph.at(step)?;
    let cons = if reg.alpha > 0.0 {
        let mut rng = stream(train.seed, "anchors", step as u64, epoch as u64);
        let anchors = AnchorSet::sample(latest, reg.anchors, reg.negatives, &mut rng)?;
        if anchors.is_empty() {
            None
        } else {
            let gates = fwd.structural.last().expect("non-empty").gates;
            Some(consistency_loss(&mut tape, gates, latest, &anchors, reg.temperature)?)
        }
    } else {
        None
    };
    let cont = if reg.beta > 0.0 {
        let window = window_of(model.explainer.config().temporal_mask, train.buffer_size);
        continuity_loss(
            &mut tape,
            &fwd.temporal,
            &session.continuity_nodes,
            &session.history,
            step,
            window,
            reg.temperature,
        )?
    } else {
        None
    };
    let mut rng = stream(train.seed, "explainer-negatives", step as u64, epoch as u64);
    let ce = bce_with_negatives(
        &mut tape,
        &model.store,
        &model.head,
        fwd.output,
        future,
        train.negative_samples_per_positive,
        &mut rng,
    )?;
    let loss = total_loss(&mut tape, ce, cons, cont, reg.alpha, reg.beta)?;
    let grads = tape.backward(loss)?;
    let params = model.explainer_params();
    opt.step_params(&mut model.store, &grads, &params);
    Ok(FineTuneLosses {
        ce: tape.scalar(ce),
        cons: cons.map(|v| tape.scalar(v)),
        cont: cont.map(|v| tape.scalar(v)),
        total: tape.scalar(loss),
    })
}

/// Embedding that scores future links: the explainer output over the buffer
/// (plus `tentative` when given), or the raw backbone embedding when the
/// explainer phase is disabled.
fn evaluate(
    model: &Model,
    graph: &DynamicGraph,
    buffer: &EmbeddingBuffer,
    h: &Tensor,
    step: usize,
    train: &TrainConfig,
) -> Result<Option<f64>> {
    let future = graph.at(step + 1)?;
    if future.num_edges() == 0 {
        return Ok(None);
    }
    let mut rng = stream(train.seed, "mrr", step as u64, 0);
    if train.explainer_epochs == 0 {
        return mrr(&model.store, &model.backbone_head, h, future, train.mrr_negatives, &mut rng).map(Some);
    }
    let mut tentative = buffer.clone();
    tentative.push(step, h.clone())?;
    let entries: Vec<(usize, &Tensor)> = tentative.entries().collect();
    let mut tape = Tape::new();
    let fwd = explain_forward(&mut tape, model, graph, &entries, None, train.tau_end, None)?;
    let emb = tape.value(fwd.output).clone();
    mrr(&model.store, &model.head, &emb, future, train.mrr_negatives, &mut rng).map(Some)
}

/// Deterministic explanation of the current buffer (newest entry is `step`).
pub(crate) fn explain_buffer(
    model: &Model,
    graph: &DynamicGraph,
    buffer: &EmbeddingBuffer,
    tau: f64,
) -> Result<(Vec<StructuralAttention>, TemporalAttention, Tensor)> {
    let entries: Vec<(usize, &Tensor)> = buffer.entries().collect();
    let mut tape = Tape::new();
    let fwd = explain_forward(&mut tape, model, graph, &entries, None, tau, None)?;
    let structural = fwd
        .structural
        .iter()
        .zip(&entries)
        .map(|(p, (ord, _))| graph.at(*ord).map(|s| structural_values(&tape, p, s)))
        .collect::<Result<Vec<_>>>()?;
    let temporal = fwd.temporal.values(&tape, buffer.ordinals());
    Ok((structural, temporal, tape.value(fwd.output).clone()))
}

/// Runs the buffer-based live-update loop over the whole stream.
pub fn live_update(
    graph: &DynamicGraph,
    model: &mut Model,
    train: &TrainConfig,
    reg: &RegularizerConfig,
) -> Result<LiveUpdate> {
    train.validate()?;
    reg.validate()?;
    if graph.len() < 2 {
        return Err(Error::Data(format!("need at least 2 snapshots, got {}", graph.len())));
    }
    let mut session = Session::new(model, graph.num_nodes(), train, reg)?;
    let mut out = LiveUpdate {
        records: Vec::new(),
        events: Vec::new(),
        explanations: Vec::new(),
        timings: Vec::new(),
        session: session.clone(),
    };
    for step in 0..graph.len() - 1 {
        let started = Instant::now();
        let snapshot = graph.at(step)?;
        let future = graph.at(step + 1)?;
        let has_labels = future.num_edges() > 0;

        out.events.push(PhaseEvent {
            step,
            phase: Phase::Evaluate,
            target: step + 1,
            labels_seen: session.labels_seen,
        });
        let tentative = encode_values(model, &session.state, snapshot)?;
        let mrr = evaluate(model, graph, &session.buffer, tentative.top(), step, train)?;

        let mut backbone_loss = None;
        let mut backbone_epochs = 0;
        if has_labels {
            out.events.push(PhaseEvent {
                step,
                phase: Phase::TrainBackbone,
                target: step + 1,
                labels_seen: session.labels_seen,
            });
            let (loss, epochs) = train_backbone(model, &session.state, snapshot, future, train, step)?;
            backbone_loss = Some(loss);
            backbone_epochs = epochs;
            session.labels_seen = Some(step + 1);
        }
        let next = encode_values(model, &session.state, snapshot)?;
        session.buffer.push(step, next.top().clone())?;
        session.state = next;

        let mut last = None;
        if has_labels && train.explainer_epochs > 0 {
            out.events.push(PhaseEvent {
                step,
                phase: Phase::FineTune,
                target: step + 1,
                labels_seen: session.labels_seen,
            });
            let mut opt = Sgd::new(train.explainer_lr, train.momentum);
            for epoch in 1..=train.explainer_epochs {
                let l = fine_tune_epoch(model, &session, graph, future, train, reg, &mut opt, step, epoch)?;
                debug!("step {step} epoch {epoch}: total {:.5} ce {:.5}", l.total, l.ce);
                last = Some(l);
            }
        }

        let (structural, temporal, _) = explain_buffer(model, graph, &session.buffer, train.tau_end)?;
        session.history.archive(step, &temporal, &session.continuity_nodes)?;
        out.explanations.push(StepExplanation {
            step,
            structural: structural.last().expect("non-empty buffer").clone(),
            temporal,
        });

        let record = MetricsRecord {
            step,
            snapshot: step + 1,
            mrr,
            backbone_loss,
            backbone_epochs,
            ce: last.as_ref().map(|l| l.ce),
            cons: last.as_ref().and_then(|l| l.cons),
            cont: last.as_ref().and_then(|l| l.cont),
            total: last.as_ref().map(|l| l.total),
        };
        info!(
            "step {step} -> {}: mrr {} backbone epochs {backbone_epochs}",
            step + 1,
            record.mrr.map_or("n/a".to_string(), |m| format!("{m:.4}"))
        );
        out.records.push(record);
        out.timings.push(started.elapsed().as_secs_f64());
    }
    out.session = session;
    Ok(out)
}

/// Scores every next snapshot with a frozen model, replaying the stream from
/// an empty state. Nothing is trained; returns per-step MRR.
pub fn replay_mrr(graph: &DynamicGraph, model: &Model, train: &TrainConfig) -> Result<Vec<Option<f64>>> {
    train.validate()?;
    if graph.len() < 2 {
        return Err(Error::Data(format!("need at least 2 snapshots, got {}", graph.len())));
    }
    let mut state = model.backbone.initial_state(graph.num_nodes());
    let mut buffer = EmbeddingBuffer::new(train.buffer_size)?;
    let mut scores = Vec::with_capacity(graph.len() - 1);
    for step in 0..graph.len() - 1 {
        let tentative = encode_values(model, &state, graph.at(step)?)?;
        scores.push(evaluate(model, graph, &buffer, tentative.top(), step, train)?);
        buffer.push(step, tentative.top().clone())?;
        state = tentative;
    }
    Ok(scores)
}

/// Plain recurrent-backbone live update with no explainer: encode, score the
/// next snapshot with the backbone head, train, advance. Returns per-step MRR.
pub fn backbone_only_reference(graph: &DynamicGraph, model: &mut Model, train: &TrainConfig) -> Result<Vec<Option<f64>>> {
    let mut state = model.backbone.initial_state(graph.num_nodes());
    let mut scores = Vec::new();
    for step in 0..graph.len() - 1 {
        let snapshot = graph.at(step)?;
        let future = graph.at(step + 1)?;
        let h = encode_values(model, &state, snapshot)?;
        if future.num_edges() == 0 {
            scores.push(None);
        } else {
            let mut rng = stream(train.seed, "mrr", step as u64, 0);
            scores.push(Some(mrr(
                &model.store,
                &model.backbone_head,
                h.top(),
                future,
                train.mrr_negatives,
                &mut rng,
            )?));
            train_backbone(model, &state, snapshot, future, train, step)?;
        }
        state = encode_values(model, &state, snapshot)?;
    }
    Ok(scores)
}
