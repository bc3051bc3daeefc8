use serde::{Deserialize, Serialize};

use super::data::{sample_batch, TrackletStore};
use super::loss::{total_loss, LossTerms};
use super::{LossConfig, TrainConfig, UtclError};
use crate::lgpenc::{similarity_cost_unchecked, Embedding, EncoderParams};
use crate::simkit::mix;

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub image: f64,
    pub text: f64,
    pub positive: f64,
    pub triplet: f64,
    /// Temperature at the end of the epoch.
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub tau: f64,
    pub trace: Vec<EpochStats>,
}

struct AdamW {
    cfg: TrainConfig,
    step: i32,
    m: EncoderParams,
    v: EncoderParams,
    m_tau: f64,
    v_tau: f64,
}

impl AdamW {
    fn new(cfg: TrainConfig) -> Self {
        Self { cfg, step: 0, m: EncoderParams::zeros(), v: EncoderParams::zeros(), m_tau: 0.0, v_tau: 0.0 }
    }

    fn update(&self, theta: &mut f64, g: f64, m: &mut f64, v: &mut f64, decay: f64) {
        let c = &self.cfg;
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / (1.0 - c.beta1.powi(self.step));
        let v_hat = *v / (1.0 - c.beta2.powi(self.step));
        *theta *= 1.0 - c.learning_rate * decay;
        *theta -= c.learning_rate * m_hat / (v_hat.sqrt() + c.adam_eps);
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, log_tau: &mut f64, d_log_tau: f64) {
        self.step += 1;
        let mut m = std::mem::replace(&mut self.m, EncoderParams::zeros());
        let mut v = std::mem::replace(&mut self.v, EncoderParams::zeros());
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(m.tensors_mut()).zip(v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                self.update(p, *g, m, v, self.cfg.weight_decay);
            }
        }
        self.m = m;
        self.v = v;
        let (mut mt, mut vt) = (self.m_tau, self.v_tau);
        self.update(log_tau, d_log_tau, &mut mt, &mut vt, 0.0);
        self.m_tau = mt;
        self.v_tau = vt;
    }
}

pub fn train(
    store: &TrackletStore,
    params_init: &EncoderParams,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome, UtclError> {
    train_with(store, params_init, train_cfg, loss_cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    store: &TrackletStore,
    params_init: &EncoderParams,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, UtclError> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    params_init.validate()?;
    let mut params = params_init.clone();
    let mut log_tau = loss_cfg.tau.ln();
    let mut opt = AdamW::new(*train_cfg);
    let mut trace = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let mut sum = LossTerms::default();
        for batch_idx in 0..train_cfg.batches_per_epoch {
            let seed = mix(mix(train_cfg.seed, epoch as u64), batch_idx as u64);
            let batch = sample_batch(store, train_cfg.batch_size, train_cfg.train_points, seed)?;
            let out = total_loss(&batch, &params, loss_cfg, log_tau)?;
            let t = out.terms;
            if !t.total.is_finite() || !out.d_log_tau.is_finite() || !out.grads.max_abs().is_finite() {
                return Err(UtclError::Diverged { epoch, batch: batch_idx, loss: t.total });
            }
            opt.step(&mut params, &out.grads, &mut log_tau, out.d_log_tau);
            sum.image += t.image;
            sum.text += t.text;
            sum.positive += t.positive;
            sum.triplet += t.triplet;
            sum.total += t.total;
        }
        let n = train_cfg.batches_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            loss: sum.total / n,
            image: sum.image / n,
            text: sum.text / n,
            positive: sum.positive / n,
            triplet: sum.triplet / n,
            tau: log_tau.exp(),
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(TrainOutcome { params, tau: log_tau.exp(), trace })
}

/// Fraction of items whose nearest other embedding (by dot product) has the
/// same label.
pub fn retrieval_accuracy(embeddings: &[Embedding], labels: &[usize]) -> f64 {
    assert_eq!(embeddings.len(), labels.len(), "one label per embedding");
    if embeddings.len() < 2 {
        return 0.0;
    }
    let hits = (0..embeddings.len())
        .filter(|&i| {
            let nearest = (0..embeddings.len())
                .filter(|&j| j != i)
                .map(|j| (j, embeddings[i].dot(&embeddings[j])))
                .fold((usize::MAX, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0;
            labels[nearest] == labels[i]
        })
        .count();
    hits as f64 / embeddings.len() as f64
}

/// Mean UTR similarity cost over same-label and different-label pairs.
pub fn intra_inter_cost(embeddings: &[Embedding], labels: &[usize]) -> (f64, f64) {
    assert_eq!(embeddings.len(), labels.len(), "one label per embedding");
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = similarity_cost_unchecked(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
