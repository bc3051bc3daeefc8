//! Tri-modal contrastive training of the point-patch encoder: InfoNCE
//! alignment with frozen image and text embeddings, a positive-patch term,
//! a batch-hard triplet term, batch sampling from labeled tracklets and an
//! AdamW training loop.

mod data;
pub mod gradcheck;
mod loss;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgpenc::{Embedding, EncoderError, PointPatch};

pub use data::{
    fnv1a, sample_batch, sample_triplets, text_embedding, toy_dataset, toy_eval_set, ToyConfig, TrackletObservation,
    TrackletStore, Triplet, POSITIVE_WINDOW,
};
pub use loss::{cc_loss, total_loss, total_loss_value, triplet_loss, LossOutput, LossTerms};
pub use train::{intra_inter_cost, retrieval_accuracy, train, train_with, EpochStats, TrainOutcome};

#[derive(Debug, Error)]
pub enum UtclError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sampling rule violated: {0}")]
    Sampling(String),
    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the image and text alignment terms.
    pub gamma: f64,
    /// Weight of the positive-patch and triplet terms.
    pub delta: f64,
    /// Triplet margin.
    pub epsilon: f64,
    /// Initial temperature; optimized as `log τ`.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 1.0, delta: 1.0, epsilon: 0.2, tau: 0.07 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), UtclError> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.gamma) || !ok(self.delta) {
            return Err(UtclError::InvalidConfig("gamma and delta must be finite and >= 0".into()));
        }
        if !ok(self.epsilon) {
            return Err(UtclError::InvalidConfig("epsilon must be finite and >= 0".into()));
        }
        loss::check_tau(self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decoupled weight decay; not applied to the temperature.
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Points per training patch.
    pub train_points: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            batch_size: 8,
            batches_per_epoch: 4,
            train_points: crate::lgpenc::TRAIN_POINTS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), UtclError> {
        let bad = |m: &str| Err(UtclError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be > 0");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.train_points == 0 {
            return bad("batch_size, batches_per_epoch and train_points must be >= 1");
        }
        Ok(())
    }
}

/// One training batch. Item `i` pairs an anchor patch with its frozen image
/// and text embeddings, a patch of the same identity and a patch of another
/// identity from a different sequence.
#[derive(Debug, Clone)]
pub struct TriModalBatch {
    pub anchors: Vec<PointPatch>,
    pub images: Vec<Embedding>,
    pub texts: Vec<Embedding>,
    pub positives: Vec<PointPatch>,
    pub negatives: Vec<PointPatch>,
}

impl TriModalBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}
