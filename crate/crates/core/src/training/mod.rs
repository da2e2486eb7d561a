//! Live-update training: model bundle, configuration, seeded random streams
//! and the per-snapshot loop.

mod head;
mod live;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use head::{
    bce_with_negatives, mrr, mrr_with, reciprocal_rank, sample_mrr_candidates, sample_training_pairs, LinkHead,
};
pub(crate) use live::explain_buffer;
pub use live::{
    backbone_only_reference, explain_forward, headline_mrr, live_update, replay_mrr, ExplainForward, LiveUpdate, MetricsRecord,
    Phase, PhaseEvent, Session, StepExplanation,
};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::explainer::{Explainer, ExplainerConfig};
use crate::numerics::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_backbone_epochs: usize,
    pub early_stop_patience: usize,
    /// Explainer fine-tuning epochs per step; 0 skips the explainer phase.
    pub explainer_epochs: usize,
    pub buffer_size: usize,
    pub backbone_lr: f64,
    pub explainer_lr: f64,
    pub momentum: f64,
    pub negative_samples_per_positive: usize,
    pub mrr_negatives: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_backbone_epochs: 100,
            early_stop_patience: 5,
            explainer_epochs: 4,
            buffer_size: 5,
            backbone_lr: 0.01,
            explainer_lr: 0.01,
            momentum: 0.9,
            negative_samples_per_positive: 1,
            mrr_negatives: 100,
            tau_start: 1.0,
            tau_end: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.backbone_lr > 0.0 && self.explainer_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.buffer_size == 0 {
            return bad("buffer_size must be >= 1");
        }
        if self.max_backbone_epochs == 0 || self.early_stop_patience == 0 {
            return bad("max_backbone_epochs and early_stop_patience must be >= 1");
        }
        if self.negative_samples_per_positive == 0 || self.mrr_negatives == 0 {
            return bad("negative counts must be >= 1");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub explainer: ExplainerConfig,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            explainer: ExplainerConfig::default(),
            head_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.explainer.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be > 0".into()));
        }
        Ok(())
    }
}

/// Every trainable piece plus the store holding their tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Scores pairs of backbone embeddings while the backbone trains.
    pub backbone_head: LinkHead,
    pub explainer: Explainer,
    /// Scores pairs of explainer outputs.
    pub head: LinkHead,
}

impl Model {
    pub fn new(input_dim: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0, 0);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, input_dim, config.backbone.clone(), &mut rng)?;
        let f = backbone.output_dim();
        let backbone_head = LinkHead::new(&mut store, "backbone_head", f, config.head_hidden, &mut rng)?;
        let explainer = Explainer::new(&mut store, f, config.explainer.clone(), &mut rng)?;
        let head = LinkHead::new(&mut store, "head", explainer.output_dim(), config.head_hidden, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            input_dim,
            store,
            backbone,
            backbone_head,
            explainer,
            head,
        })
    }

    /// Re-binds a model to a store restored from a checkpoint.
    pub fn from_store(input_dim: usize, config: &ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::from_store(&store, input_dim, config.backbone.clone())?;
        let explainer = Explainer::from_store(&store, backbone.output_dim(), config.explainer.clone())?;
        Ok(Model {
            config: config.clone(),
            input_dim,
            backbone_head: LinkHead::from_store(&store, "backbone_head")?,
            head: LinkHead::from_store(&store, "head")?,
            store,
            backbone,
            explainer,
        })
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut ids = self.backbone.param_ids();
        ids.extend(self.backbone_head.param_ids());
        ids
    }

    pub fn explainer_params(&self) -> Vec<ParamId> {
        let mut ids = self.explainer.param_ids();
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Independent generator for one purpose at one step, derived from the run seed.
pub fn stream(seed: u64, purpose: &str, step: u64, sub: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(step.to_le_bytes());
    h.update(sub.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
