//! Per-frame tracking loop: predict, associate, update, and manage track
//! birth and death in the AB3DMOT style.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{self, AssocConfig, AssocError, Matcher};
use crate::geom::Box3D;
use crate::kalman::{KFConfig, KFState, KalmanError, KalmanFilter};
use crate::lgpenc::{Embedding, EncoderError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Assoc(#[from] AssocError),
    #[error(transparent)]
    Embedding(#[from] EncoderError),
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub category: String,
}

/// A detection paired with its appearance representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub detection: Detection,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

/// How a matched detection's embedding refreshes the track's.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingUpdate {
    /// The latest detection's embedding replaces the stored one.
    #[default]
    Replace,
    /// `normalize(alpha · stored + (1 − alpha) · new)`.
    Ema { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub min_hits: u32,
    pub max_age: u32,
    pub embedding_update: EmbeddingUpdate,
    /// When a track is confirmed, also emit the states it had while
    /// tentative (tagged with their own frames).
    pub backfill: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { min_hits: 3, max_age: 2, embedding_update: EmbeddingUpdate::Replace, backfill: true }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if self.min_hits < 1 {
            return Err(TrackerError::InvalidConfig("min_hits must be at least 1"));
        }
        if self.max_age < 1 {
            return Err(TrackerError::InvalidConfig("max_age must be at least 1"));
        }
        if let EmbeddingUpdate::Ema { alpha } = self.embedding_update {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(TrackerError::InvalidConfig("ema alpha must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub kf: KFState,
    pub embedding: Embedding,
    /// Consecutive frames with a match.
    pub hits: u32,
    /// Consecutive frames without a match.
    pub misses: u32,
    pub status: TrackStatus,
    pub category: String,
    pub score: f64,
    pending: Vec<TrackOutput>,
}

/// One emitted trajectory state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub frame: usize,
    pub id: u64,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub category: String,
}

/// Tracking state for one sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    assoc: AssocConfig,
    kf: KalmanFilter,
    tracks: Vec<Track>,
    next_id: u64,
    frame: usize,
}

impl Tracker {
    pub fn new(config: TrackerConfig, assoc: AssocConfig, kalman: KFConfig) -> Result<Self, TrackerError> {
        config.validate()?;
        if assoc.max_cost.is_nan() {
            return Err(TrackerError::InvalidConfig("max_cost must not be NaN"));
        }
        Ok(Self { config, assoc, kf: KalmanFilter::new(kalman)?, tracks: Vec::new(), next_id: 1, frame: 0 })
    }

    /// Live tracks in creation order.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Index of the next frame [`Tracker::step`] will process.
    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Processes one frame and returns the confirmed tracks matched in it.
    /// With backfill enabled, a track confirmed in this frame also returns
    /// its earlier tentative states.
    pub fn step(&mut self, observations: &[Observation]) -> Result<Vec<TrackOutput>, TrackerError> {
        let frame = self.frame;
        for t in &mut self.tracks {
            t.kf = self.kf.predict(&t.kf);
        }

        let predicted: Vec<Box3D> = self.tracks.iter().map(|t| t.kf.to_box()).collect();
        let det_boxes: Vec<Box3D> = observations.iter().map(|o| o.detection.bbox).collect();
        let (track_embeds, det_embeds): (Vec<Embedding>, Vec<Embedding>) = if self.assoc.mode.uses_appearance() {
            (
                self.tracks.iter().map(|t| t.embedding.clone()).collect(),
                observations.iter().map(|o| o.embedding.clone()).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let costs = assoc::build_cost_matrix_for(self.assoc.mode, &track_embeds, &det_embeds, &predicted, &det_boxes)?;
        let assignment = match self.assoc.matcher {
            Matcher::Greedy => assoc::greedy_assign(&costs, self.assoc.max_cost),
            Matcher::Hungarian => {
                let mut a = assoc::hungarian_assign(&costs);
                a.matches.retain(|&(r, c)| costs.get(r, c) <= self.assoc.max_cost);
                a
            }
        };

        let mut matched = vec![false; self.tracks.len()];
        let mut used = vec![false; observations.len()];
        for &(r, c) in &assignment.matches {
            matched[r] = true;
            used[c] = true;
            let obs = &observations[c];
            let t = &mut self.tracks[r];
            t.kf = self.kf.update(&t.kf, &obs.detection.bbox)?;
            t.embedding = refresh_embedding(&t.embedding, &obs.embedding, self.config.embedding_update)?;
            t.hits += 1;
            t.misses = 0;
            t.score = obs.detection.score;
            t.category.clone_from(&obs.detection.category);
        }
        for (t, _) in self.tracks.iter_mut().zip(&matched).filter(|(_, m)| !**m) {
            t.hits = 0;
            t.misses += 1;
            if t.misses > self.config.max_age {
                t.status = TrackStatus::Dead;
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Dead);

        for (obs, _) in observations.iter().zip(&used).filter(|(_, u)| !**u) {
            self.tracks.push(Track {
                id: self.next_id,
                kf: self.kf.init(&obs.detection.bbox),
                embedding: obs.embedding.clone(),
                hits: 1,
                misses: 0,
                status: TrackStatus::Tentative,
                category: obs.detection.category.clone(),
                score: obs.detection.score,
                pending: Vec::new(),
            });
            self.next_id += 1;
        }

        let mut out = Vec::new();
        for t in &mut self.tracks {
            if t.misses > 0 {
                continue;
            }
            let row = TrackOutput {
                frame,
                id: t.id,
                bbox: t.kf.to_box(),
                score: t.score,
                category: t.category.clone(),
            };
            match t.status {
                TrackStatus::Tentative if t.hits >= self.config.min_hits => {
                    t.status = TrackStatus::Confirmed;
                    out.append(&mut t.pending);
                    out.push(row);
                }
                TrackStatus::Tentative => {
                    if self.config.backfill {
                        t.pending.push(row);
                    }
                }
                TrackStatus::Confirmed => out.push(row),
                TrackStatus::Dead => {}
            }
        }
        self.frame += 1;
        Ok(out)
    }
}

fn refresh_embedding(old: &Embedding, new: &Embedding, mode: EmbeddingUpdate) -> Result<Embedding, EncoderError> {
    match mode {
        EmbeddingUpdate::Replace => Ok(new.clone()),
        EmbeddingUpdate::Ema { alpha } => {
            let mixed = old.as_slice().iter().zip(new.as_slice()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            // Opposite embeddings can cancel; keep the new one then.
            Embedding::normalized(mixed).or_else(|_| Ok(new.clone()))
        }
    }
}

/// Runs a whole detection stream and returns every emitted state sorted by
/// `(frame, id)`.
pub fn run_sequence(
    stream: &[Vec<Observation>],
    config: TrackerConfig,
    assoc: AssocConfig,
    kalman: KFConfig,
) -> Result<Vec<TrackOutput>, TrackerError> {
    let mut tracker = Tracker::new(config, assoc, kalman)?;
    let mut rows = Vec::new();
    for frame in stream {
        rows.extend(tracker.step(frame)?);
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(k: usize) -> Embedding {
        let mut v = vec![0.0; 8];
        v[k] = 1.0;
        Embedding::new(v).unwrap()
    }

    fn obs(x: f64, y: f64, k: usize) -> Observation {
        Observation {
            detection: Detection {
                bbox: Box3D::new(x, y, 0.0, 4.0, 2.0, 1.5, 0.0).unwrap(),
                score: 0.9,
                category: "Car".into(),
            },
            embedding: emb(k),
        }
    }

    fn tracker() -> Tracker {
        Tracker::new(TrackerConfig::default(), AssocConfig::default(), KFConfig::default()).unwrap()
    }

    #[test]
    fn first_frame_births_tentative_tracks() {
        let mut t = tracker();
        let out = t.step(&[obs(0.0, 0.0, 0), obs(20.0, 0.0, 1), obs(40.0, 0.0, 2)]).unwrap();
        assert!(out.is_empty());
        assert_eq!(t.tracks().len(), 3);
        assert!(t.tracks().iter().all(|tr| tr.status == TrackStatus::Tentative));
        assert_eq!(t.tracks().iter().map(|tr| tr.id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_frame_ages_tracks() {
        let mut t = tracker();
        t.step(&[obs(0.0, 0.0, 0)]).unwrap();
        assert!(t.step(&[]).unwrap().is_empty());
        assert_eq!(t.tracks().len(), 1);
        assert_eq!(t.tracks()[0].misses, 1);
        t.step(&[]).unwrap();
        t.step(&[]).unwrap();
        assert!(t.tracks().is_empty());
    }

    #[test]
    fn single_object_confirms_on_third_frame() {
        let mut t = tracker();
        let mut per_frame = Vec::new();
        for f in 0..5 {
            per_frame.push(t.step(&[obs(f as f64, 0.0, 0)]).unwrap());
        }
        assert!(per_frame[0].is_empty() && per_frame[1].is_empty());
        // The third frame confirms and backfills the two tentative states.
        assert_eq!(per_frame[2].iter().map(|r| r.frame).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(per_frame[3..].iter().all(|o| o.len() == 1 && o[0].frame >= 3));
        assert!(per_frame.iter().flatten().all(|r| r.id == 1));
        assert_eq!(t.tracks()[0].status, TrackStatus::Confirmed);
    }

    #[test]
    fn no_backfill_emits_only_confirmed_frames() {
        let cfg = TrackerConfig { backfill: false, ..TrackerConfig::default() };
        let stream: Vec<_> = (0..5).map(|f| vec![obs(f as f64, 0.0, 0)]).collect();
        let rows = run_sequence(&stream, cfg, AssocConfig::default(), KFConfig::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn ids_are_never_reused() {
        let mut t = tracker();
        t.step(&[obs(0.0, 0.0, 0)]).unwrap();
        for _ in 0..3 {
            t.step(&[]).unwrap();
        }
        t.step(&[obs(0.0, 0.0, 0)]).unwrap();
        assert_eq!(t.tracks()[0].id, 2);
    }

    #[test]
    fn empty_stream_gives_nothing() {
        let rows = run_sequence(&[], TrackerConfig::default(), AssocConfig::default(), KFConfig::default()).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn ema_blends_embeddings() {
        let e = refresh_embedding(&emb(0), &emb(1), EmbeddingUpdate::Ema { alpha: 0.5 }).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.as_slice()[0] - s).abs() < 1e-12 && (e.as_slice()[1] - s).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = TrackerConfig { min_hits: 0, ..TrackerConfig::default() };
        assert!(Tracker::new(bad, AssocConfig::default(), KFConfig::default()).is_err());
        let bad = TrackerConfig { embedding_update: EmbeddingUpdate::Ema { alpha: 1.5 }, ..TrackerConfig::default() };
        assert!(bad.validate().is_err());
        let json = r#"{"embedding_update": {"mode": "ema", "alpha": 0.8}}"#;
        let cfg: TrackerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.embedding_update, EmbeddingUpdate::Ema { alpha: 0.8 });
    }
}
