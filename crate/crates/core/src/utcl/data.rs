use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use super::{TriModalBatch, UtclError};
use crate::dataio::format_text_prompt;
use crate::geom::{bev_corners, Box3D};
use crate::lgpenc::{Embedding, PointPatch, EMBED_DIM};
use crate::simkit::{category_dims, cuboid_patch, identity_anchor, mix, perturb, random_unit};

/// Largest frame gap between an anchor and its positive.
pub const POSITIVE_WINDOW: i64 = 3;

/// One labeled observation with its frozen image and text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletObservation {
    #[serde(deserialize_with = "string_or_number")]
    pub sequence_id: String,
    pub frame: i64,
    pub object_id: u64,
    pub image_embedding: Embedding,
    pub text_embedding: Embedding,
    /// Object box; training patches are synthesized from its dimensions.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        Text(String),
        Number(i64),
    }
    Ok(match Id::deserialize(d)? {
        Id::Text(s) => s,
        Id::Number(n) => n.to_string(),
    })
}

impl TrackletObservation {
    /// Box used for patch synthesis: the stored box, or the category's mean
    /// size at the origin.
    fn patch_box(&self, index: usize) -> Result<Box3D, UtclError> {
        if let Some(b) = self.bbox {
            return Ok(b);
        }
        let dims = self.category.as_deref().and_then(category_dims).ok_or_else(|| {
            UtclError::Sampling(format!("observation {index} has neither a box nor a known category to size its patch"))
        })?;
        Ok(Box3D::new(0.0, 0.0, 0.0, dims[0], dims[1], dims[2], 0.0).expect("prior dims are positive"))
    }
}

/// Labeled tracklet observations with precomputed positive candidates.
#[derive(Debug, Clone)]
pub struct TrackletStore {
    observations: Vec<TrackletObservation>,
    positives: Vec<Vec<usize>>,
}

impl TrackletStore {
    pub fn new(observations: Vec<TrackletObservation>) -> Result<Self, UtclError> {
        for (k, o) in observations.iter().enumerate() {
            for (what, e) in [("image", &o.image_embedding), ("text", &o.text_embedding)] {
                if e.dim() != EMBED_DIM {
                    return Err(UtclError::Dataset {
                        line: k + 1,
                        message: format!("{what} embedding has {} dims, expected {EMBED_DIM}", e.dim()),
                    });
                }
            }
        }
        let mut groups: BTreeMap<(&str, u64), Vec<usize>> = BTreeMap::new();
        for (k, o) in observations.iter().enumerate() {
            groups.entry((o.sequence_id.as_str(), o.object_id)).or_default().push(k);
        }
        let mut positives = vec![Vec::new(); observations.len()];
        for members in groups.values() {
            for &i in members {
                positives[i] = members
                    .iter()
                    .copied()
                    .filter(|&j| j != i && (observations[j].frame - observations[i].frame).abs() <= POSITIVE_WINDOW)
                    .collect();
            }
        }
        Ok(Self { observations, positives })
    }

    /// Reads JSON lines, one observation per line; blank lines are skipped.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self, UtclError> {
        let mut obs = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let o = serde_json::from_str(&line).map_err(|e| UtclError::Dataset { line: k + 1, message: e.to_string() })?;
            obs.push(o);
        }
        Self::new(obs)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), UtclError> {
        for o in &self.observations {
            serde_json::to_writer(&mut out, o).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn observations(&self) -> &[TrackletObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Distinct `(sequence_id, object_id)` identities in first-seen order.
    pub fn identities(&self) -> Vec<(String, u64)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for o in &self.observations {
            if seen.insert((o.sequence_id.clone(), o.object_id)) {
                out.push((o.sequence_id.clone(), o.object_id));
            }
        }
        out
    }

    fn check_rules(&self) -> Result<(), UtclError> {
        let sequences: BTreeSet<&str> = self.observations.iter().map(|o| o.sequence_id.as_str()).collect();
        if sequences.len() < 2 {
            return Err(UtclError::Sampling(format!(
                "negatives must come from a different sequence than the anchor, but the dataset has {} sequence(s)",
                sequences.len()
            )));
        }
        if self.positives.iter().all(Vec::is_empty) {
            return Err(UtclError::Sampling(format!(
                "positives need an identity observed twice within ±{POSITIVE_WINDOW} frames; none found"
            )));
        }
        Ok(())
    }
}

/// Indices of one anchor/positive/negative item. `positive == anchor` marks
/// the fallback where the anchor has no other observation in the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws `b` triplets: uniform anchors, positives of the same identity
/// within the frame window, negatives uniform over other sequences.
pub fn sample_triplets(store: &TrackletStore, b: usize, seed: u64) -> Result<Vec<Triplet>, UtclError> {
    if b == 0 {
        return Err(UtclError::InvalidConfig("batch size must be >= 1".into()));
    }
    store.check_rules()?;
    let obs = &store.observations;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(b);
    for _ in 0..b {
        let anchor = rng.random_range(0..obs.len());
        let cands = &store.positives[anchor];
        let positive = if cands.is_empty() { anchor } else { cands[rng.random_range(0..cands.len())] };
        let seq = &obs[anchor].sequence_id;
        let others = obs.len() - obs.iter().filter(|o| &o.sequence_id == seq).count();
        let mut pick = rng.random_range(0..others);
        let negative = obs
            .iter()
            .enumerate()
            .filter(|(_, o)| &o.sequence_id != seq)
            .find_map(|(k, _)| {
                if pick == 0 {
                    Some(k)
                } else {
                    pick -= 1;
                    None
                }
            })
            .expect("pick is below the count of other-sequence observations");
        out.push(Triplet { anchor, positive, negative });
    }
    Ok(out)
}

/// Samples triplets and synthesizes an `n_points` patch for every role.
/// Each patch has its own seed, so a fallback positive is a fresh sample.
pub fn sample_batch(store: &TrackletStore, b: usize, n_points: usize, seed: u64) -> Result<TriModalBatch, UtclError> {
    if n_points == 0 {
        return Err(UtclError::InvalidConfig("patches need at least one point".into()));
    }
    let triplets = sample_triplets(store, b, seed)?;
    let obs = &store.observations;
    let patch = |idx: usize, item: usize, role: u64| -> Result<PointPatch, UtclError> {
        let bbox = obs[idx].patch_box(idx)?;
        Ok(cuboid_patch(&bbox, n_points, mix(mix(seed, item as u64), role)))
    };
    let mut batch = TriModalBatch {
        anchors: Vec::with_capacity(b),
        images: Vec::with_capacity(b),
        texts: Vec::with_capacity(b),
        positives: Vec::with_capacity(b),
        negatives: Vec::with_capacity(b),
    };
    for (item, t) in triplets.iter().enumerate() {
        batch.anchors.push(patch(t.anchor, item, 1)?);
        batch.positives.push(patch(t.positive, item, 2)?);
        batch.negatives.push(patch(t.negative, item, 3)?);
        batch.images.push(obs[t.anchor].image_embedding.clone());
        batch.texts.push(obs[t.anchor].text_embedding.clone());
    }
    Ok(batch)
}

/// 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Stand-in text embedding: the category's anchor plus a prompt-seeded
/// unit vector scaled by `noise`, normalized.
pub fn text_embedding(category: &str, bbox: &Box3D, noise: f64, seed: u64) -> Embedding {
    let prompt = format_text_prompt(category, &bev_corners(bbox));
    let anchor = random_unit(EMBED_DIM, &mut ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(category.as_bytes()))));
    let detail = random_unit(EMBED_DIM, &mut ChaCha8Rng::seed_from_u64(mix(seed, fnv1a(prompt.as_bytes()))));
    let v = anchor.as_slice().iter().zip(detail.as_slice()).map(|(a, d)| a + noise * d).collect();
    Embedding::normalized(v).unwrap_or(anchor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_identities: usize,
    pub n_sequences: usize,
    pub frames_per_identity: usize,
    /// Noise-to-signal ratio of image embeddings around the identity anchor.
    pub image_noise: f64,
    pub text_noise: f64,
    /// Smallest relative size difference between identities of a category.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            n_sequences: 4,
            frames_per_identity: 6,
            image_noise: 0.3,
            text_noise: 0.3,
            min_separation: 0.15,
            seed: 0,
        }
    }
}

const TOY_CATEGORIES: [&str; 3] = ["Car", "Cyclist", "Pedestrian"];

/// Synthetic tracklets: identity `k` lives in sequence `k mod n_sequences`,
/// has a category-scaled size kept apart from its category peers, and moves
/// 1 m per frame along x.
pub fn toy_dataset(cfg: &ToyConfig) -> Result<TrackletStore, UtclError> {
    if cfg.n_identities == 0 || cfg.n_sequences < 2 || cfg.frames_per_identity < 2 {
        return Err(UtclError::InvalidConfig(
            "toy dataset needs >= 1 identity, >= 2 sequences and >= 2 frames per identity".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0x70));
    let mut sizes: Vec<(&str, [f64; 3])> = Vec::with_capacity(cfg.n_identities);
    for k in 0..cfg.n_identities {
        let category = TOY_CATEGORIES[k % TOY_CATEGORIES.len()];
        let mean = category_dims(category).expect("toy categories are known");
        let mut attempts = 0;
        let dims = loop {
            let d = mean.map(|m| m * rng.random_range(0.6..1.4));
            let apart = sizes.iter().filter(|(c, _)| *c == category).all(|(_, o)| {
                (0..3).map(|a| ((d[a] - o[a]) / mean[a]).abs()).fold(0.0, f64::max) >= cfg.min_separation
            });
            attempts += 1;
            if apart || attempts > 10_000 {
                break d;
            }
        };
        sizes.push((category, dims));
    }

    let mut obs = Vec::with_capacity(cfg.n_identities * cfg.frames_per_identity);
    for (k, (category, d)) in sizes.iter().enumerate() {
        let object_id = k as u64 + 1;
        let anchor = identity_anchor(object_id, cfg.seed);
        for t in 0..cfg.frames_per_identity {
            let bbox = Box3D::new(10.0 * k as f64 + t as f64, 0.0, d[2] / 2.0, d[0], d[1], d[2], 0.0)
                .expect("toy dims are positive");
            obs.push(TrackletObservation {
                sequence_id: format!("{:04}", k % cfg.n_sequences),
                frame: t as i64,
                object_id,
                image_embedding: perturb(&anchor, cfg.image_noise, &mut rng),
                text_embedding: text_embedding(category, &bbox, cfg.text_noise, cfg.seed),
                bbox: Some(bbox),
                category: Some(category.to_string()),
            });
        }
    }
    TrackletStore::new(obs)
}

/// Held-out patches: `per_identity` fresh samples of every identity's first
/// box. Returns patches and identity labels (indices into
/// [`TrackletStore::identities`]).
pub fn toy_eval_set(
    store: &TrackletStore,
    per_identity: usize,
    n_points: usize,
    seed: u64,
) -> Result<(Vec<PointPatch>, Vec<usize>), UtclError> {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for (label, (seq, id)) in store.identities().iter().enumerate() {
        let idx = store
            .observations
            .iter()
            .position(|o| &o.sequence_id == seq && o.object_id == *id)
            .expect("identity comes from the store");
        let bbox = store.observations[idx].patch_box(idx)?;
        for r in 0..per_identity {
            patches.push(cuboid_patch(&bbox, n_points, mix(mix(seed, 0xe7a1), (label * per_identity + r) as u64)));
            labels.push(label);
        }
    }
    Ok((patches, labels))
}
