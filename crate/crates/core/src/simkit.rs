//! Synthetic scenarios: ground-truth motion, noisy detections, clutter,
//! oracle embeddings and cuboid point patches.
//!
//! Scenario files are JSON lines. The first line is a `meta` record, each
//! following line one `frame` record:
//!
//! ```text
//! {"kind":"meta","name":"noisy","seed":7,"config":{...}}
//! {"kind":"frame","frame":0,"ground_truth":[{"object_id":1,"category":"Car","box":{...}}],
//!  "detections":[{"box":{...},"score":0.93,"category":"Car","object_id":1,"embedding":[...]}]}
//! ```
//!
//! `object_id` on a detection is `null` for clutter; `embedding` is optional.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Box3D;
use crate::lgpenc::{Embedding, PointPatch, EMBED_DIM};
use crate::tracker::{Detection, Observation};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("scenario line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("scenario line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("scenario I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame {frame}, detection {index} has no embedding")]
    MissingEmbedding { frame: usize, index: usize },
    #[error("unknown fixture `{0}` (expected easy, moderate or difficult)")]
    UnknownFixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_objects: usize,
    pub n_frames: usize,
    /// Car speed range in meters per frame; other categories move slower.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Heading random-walk step, radians per frame.
    pub turn_sigma: f64,
    /// Detection center noise, meters per axis.
    pub pos_sigma: f64,
    pub p_miss: f64,
    /// Expected clutter detections per frame.
    pub clutter_rate: f64,
    pub embedding_noise: f64,
    /// Relative frequency of each object category.
    pub category_weights: CategoryWeights,
    /// Objects start uniformly in `[-area, area]²`; clutter is placed there too.
    pub area: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_objects: 10,
            n_frames: 50,
            speed_min: 0.2,
            speed_max: 1.0,
            turn_sigma: 0.03,
            pos_sigma: 0.0,
            p_miss: 0.0,
            clutter_rate: 0.0,
            embedding_noise: 0.5,
            category_weights: CategoryWeights::default(),
            area: 50.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_miss) {
            return bad("p_miss must lie in [0, 1]");
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite()) {
            return bad("clutter_rate must be finite and >= 0");
        }
        if !(self.pos_sigma >= 0.0 && self.turn_sigma >= 0.0 && self.embedding_noise >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad("speeds must satisfy 0 <= speed_min <= speed_max");
        }
        if !(self.area > 0.0 && self.area.is_finite()) {
            return bad("area must be > 0");
        }
        let w = self.category_weights.as_array();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return bad("category weights must be >= 0 with a positive sum");
        }
        Ok(())
    }
}

/// Vehicles only by default: pedestrian footprints (about 0.8 × 0.7 m)
/// have a gate radius close to the detection noise levels of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryWeights {
    pub car: f64,
    pub cyclist: f64,
    pub pedestrian: f64,
}

impl Default for CategoryWeights {
    fn default() -> Self {
        Self { car: 0.8, cyclist: 0.2, pedestrian: 0.0 }
    }
}

impl CategoryWeights {
    fn as_array(&self) -> [f64; 3] {
        [self.car, self.cyclist, self.pedestrian]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub object_id: u64,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDetection {
    #[serde(flatten)]
    pub detection: Detection,
    /// Source object, `None` for clutter. Never shown to the tracker.
    pub object_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFrame {
    pub frame: usize,
    pub ground_truth: Vec<GtObject>,
    pub detections: Vec<SimDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub meta: ScenarioMeta,
    pub frames: Vec<ScenarioFrame>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Meta(ScenarioMeta),
    Frame(ScenarioFrame),
}

impl Scenario {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), SimError> {
        serde_json::to_writer(&mut out, &Record::Meta(self.meta.clone())).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for f in &self.frames {
            // Serialize through a borrowed view to avoid cloning every frame.
            #[derive(Serialize)]
            struct FrameRef<'a> {
                kind: &'static str,
                #[serde(flatten)]
                frame: &'a ScenarioFrame,
            }
            serde_json::to_writer(&mut out, &FrameRef { kind: "frame", frame: f }).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SimError> {
        let mut meta = None;
        let mut frames = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|source| SimError::Parse { line: lineno, source })? {
                Record::Meta(m) if meta.is_none() && frames.is_empty() => meta = Some(m),
                Record::Meta(_) => return Err(schema(lineno, "meta record must come first and only once")),
                Record::Frame(f) => {
                    if meta.is_none() {
                        return Err(schema(lineno, "frame record before meta record"));
                    }
                    if f.frame != frames.len() {
                        return Err(schema(lineno, &format!("expected frame {}, found {}", frames.len(), f.frame)));
                    }
                    frames.push(f);
                }
            }
        }
        let meta = meta.ok_or_else(|| schema(0, "missing meta record"))?;
        Ok(Scenario { meta, frames })
    }

    /// Detection stream with the embeddings stored in the scenario.
    pub fn observations(&self) -> Result<Vec<Vec<Observation>>, SimError> {
        self.frames
            .iter()
            .map(|f| {
                f.detections
                    .iter()
                    .enumerate()
                    .map(|(index, d)| {
                        let embedding = d
                            .embedding
                            .clone()
                            .ok_or(SimError::MissingEmbedding { frame: f.frame, index })?;
                        Ok(Observation { detection: d.detection.clone(), embedding })
                    })
                    .collect()
            })
            .collect()
    }

    /// Stores per-detection embeddings (same nesting as `frames`).
    pub fn set_embeddings(&mut self, embeddings: Vec<Vec<Embedding>>) {
        for (f, es) in self.frames.iter_mut().zip(embeddings) {
            for (d, e) in f.detections.iter_mut().zip(es) {
                d.embedding = Some(e);
            }
        }
    }
}

fn schema(line: usize, msg: &str) -> SimError {
    SimError::Schema { line, msg: msg.to_string() }
}

/// Per-category size prior: mean dims `(l, w, h)`, dims jitter σ, and the
/// speed factor applied to the configured speed range.
struct CategoryPrior {
    name: &'static str,
    dims: [f64; 3],
    dims_sigma: f64,
    speed_factor: f64,
}

const CATEGORIES: [CategoryPrior; 3] = [
    CategoryPrior { name: "Car", dims: [4.2, 1.8, 1.6], dims_sigma: 0.3, speed_factor: 1.0 },
    CategoryPrior { name: "Cyclist", dims: [1.8, 0.7, 1.7], dims_sigma: 0.1, speed_factor: 0.5 },
    CategoryPrior { name: "Pedestrian", dims: [0.8, 0.7, 1.75], dims_sigma: 0.08, speed_factor: 0.25 },
];

/// Mean `(l, w, h)` of a known category (`Car`, `Cyclist`, `Pedestrian`,
/// case-insensitive).
pub fn category_dims(name: &str) -> Option<[f64; 3]> {
    CATEGORIES.iter().find(|c| c.name.eq_ignore_ascii_case(name)).map(|c| c.dims)
}

fn sample_category(weights: &CategoryWeights, rng: &mut impl Rng) -> &'static CategoryPrior {
    let w = weights.as_array();
    let u: f64 = rng.random::<f64>() * w.iter().sum::<f64>();
    let mut acc = 0.0;
    for (c, w) in CATEGORIES.iter().zip(w) {
        acc += w;
        if u < acc {
            return c;
        }
    }
    // Rounding can leave u at the total; fall back to the last allowed category.
    let last = w.iter().rposition(|v| *v > 0.0).unwrap_or(0);
    &CATEGORIES[last]
}

fn sample_dims(c: &CategoryPrior, rng: &mut impl Rng) -> [f64; 3] {
    let n = Normal::new(0.0, c.dims_sigma).expect("finite sigma");
    c.dims.map(|d| (d + n.sample(rng)).max(0.3 * d))
}

fn gaussian(rng: &mut impl Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

struct Mover {
    id: u64,
    category: &'static str,
    dims: [f64; 3],
    pos: [f64; 2],
    heading: f64,
    speed: f64,
}

/// Generates a scenario; deterministic under `cfg.seed`.
pub fn generate(cfg: &SimConfig) -> Result<Scenario, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut movers: Vec<Mover> = (0..cfg.n_objects)
        .map(|k| {
            let c = sample_category(&cfg.category_weights, &mut rng);
            Mover {
                id: k as u64 + 1,
                category: c.name,
                dims: sample_dims(c, &mut rng),
                pos: [rng.random_range(-cfg.area..=cfg.area), rng.random_range(-cfg.area..=cfg.area)],
                heading: rng.random_range(-PI..PI),
                speed: rng.random_range(cfg.speed_min..=cfg.speed_max) * c.speed_factor,
            }
        })
        .collect();
    let clutter = Poisson::new(cfg.clutter_rate).ok();

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for frame in 0..cfg.n_frames {
        if frame > 0 {
            for m in &mut movers {
                m.heading += gaussian(&mut rng, cfg.turn_sigma);
                m.pos[0] += m.speed * m.heading.cos();
                m.pos[1] += m.speed * m.heading.sin();
            }
        }
        let mut ground_truth = Vec::with_capacity(movers.len());
        let mut detections = Vec::new();
        for m in &movers {
            let [l, w, h] = m.dims;
            let bbox = Box3D::new(m.pos[0], m.pos[1], h / 2.0, l, w, h, m.heading).expect("simulated box is valid");
            ground_truth.push(GtObject { object_id: m.id, category: m.category.to_string(), bbox });
            // Draw every random number unconditionally so that changing
            // p_miss or sigma does not reshuffle the rest of the stream.
            let missed = rng.random::<f64>() < cfg.p_miss;
            let noise = [gaussian(&mut rng, cfg.pos_sigma), gaussian(&mut rng, cfg.pos_sigma)];
            let score = rng.random_range(0.6..1.0);
            if !missed {
                let mut det_box = bbox;
                det_box.x += noise[0];
                det_box.y += noise[1];
                detections.push(SimDetection {
                    detection: Detection { bbox: det_box, score, category: m.category.to_string() },
                    object_id: Some(m.id),
                    embedding: None,
                });
            }
        }
        let n_clutter = clutter.map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_clutter {
            let c = sample_category(&cfg.category_weights, &mut rng);
            let [l, w, h] = sample_dims(c, &mut rng);
            let x = rng.random_range(-cfg.area..=cfg.area);
            let y = rng.random_range(-cfg.area..=cfg.area);
            let yaw = rng.random_range(-PI..PI);
            detections.push(SimDetection {
                detection: Detection {
                    bbox: Box3D::new(x, y, h / 2.0, l, w, h, yaw).expect("clutter box is valid"),
                    score: rng.random_range(0.3..0.8),
                    category: c.name.to_string(),
                },
                object_id: None,
                embedding: None,
            });
        }
        shuffle(&mut detections, &mut rng);
        frames.push(ScenarioFrame { frame, ground_truth, detections });
    }
    Ok(Scenario { meta: ScenarioMeta { name: "generated".into(), seed: cfg.seed, config: Some(cfg.clone()) }, frames })
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
}

/// Uniformly random unit vector of dimension `dim`.
pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(e) = Embedding::normalized(v) {
            return e;
        }
    }
}

/// `normalize(anchor + kappa · g)` with `g ~ N(0, I / D)`, so `kappa` is
/// the noise-to-signal norm ratio.
pub fn perturb(anchor: &Embedding, kappa: f64, rng: &mut impl Rng) -> Embedding {
    let scale = kappa / (anchor.dim() as f64).sqrt();
    let v: Vec<f64> = anchor.as_slice().iter().map(|a| a + gaussian(rng, scale)).collect();
    Embedding::normalized(v).unwrap_or_else(|_| anchor.clone())
}

/// Fixed random unit anchor for an identity, independent of the scenario.
pub fn identity_anchor(object_id: u64, seed: u64) -> Embedding {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, object_id));
    random_unit(EMBED_DIM, &mut rng)
}

/// SplitMix64-style mixing of two words into a seed.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identity-clustered stand-in embeddings for every detection: each object
/// gets a fixed anchor, detections get `normalize(anchor + κ·noise)`, and
/// clutter gets fresh random unit vectors.
pub fn oracle_embeddings(s: &Scenario, kappa: f64, seed: u64) -> Vec<Vec<Embedding>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x0e));
    s.frames
        .iter()
        .map(|f| {
            f.detections
                .iter()
                .map(|d| match d.object_id {
                    Some(id) => perturb(&identity_anchor(id, seed), kappa, &mut rng),
                    None => random_unit(EMBED_DIM, &mut rng),
                })
                .collect()
        })
        .collect()
}

/// Object-frame points sampled uniformly over the surface of `bbox`, with
/// Gaussian jitter of 1% of each dimension (clamped to 5%).
pub fn cuboid_patch(bbox: &Box3D, n_points: usize, seed: u64) -> PointPatch {
    assert!(n_points >= 1, "n_points must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = [bbox.l / 2.0, bbox.w / 2.0, bbox.h / 2.0];
    // Face pairs normal to x, y, z, weighted by area.
    let areas = [bbox.w * bbox.h, bbox.l * bbox.h, bbox.l * bbox.w];
    let total: f64 = areas.iter().sum();
    let rows: Vec<[f64; 3]> = (0..n_points)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            let axis = if u < areas[0] {
                0
            } else if u < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis {
                    if rng.random::<bool>() {
                        half[k]
                    } else {
                        -half[k]
                    }
                } else {
                    rng.random_range(-half[k]..=half[k])
                };
            }
            for (k, v) in p.iter_mut().enumerate() {
                let j = gaussian(&mut rng, 0.01 * 2.0 * half[k]).clamp(-0.1 * half[k], 0.1 * half[k]);
                *v += j;
            }
            p
        })
        .collect();
    PointPatch::from_rows(&rows).expect("cuboid points are finite")
}

/// Names of the crafted regression scenarios.
pub const FIXTURES: [&str; 3] = ["easy", "moderate", "difficult"];

/// Crafted scenarios with embeddings already attached.
///
/// * `easy`: two well separated cars on straight paths.
/// * `moderate`: two look-alike cars 30 m apart, and two pedestrians in
///   adjacent lanes that meet and turn back.
/// * `difficult`: a small object moving about 1 m per frame, so its box
///   never overlaps the previous one.
pub fn fixture(name: &str) -> Result<Scenario, SimError> {
    let seed = 11;
    let tracks: Vec<FixtureObject> = match name {
        "easy" => vec![
            FixtureObject::straight(1, "Car", [4.0, 1.8, 1.5], [0.0, 0.0], [0.8, 0.0], 30),
            FixtureObject::straight(2, "Car", [4.0, 1.8, 1.5], [0.0, 20.0], [0.6, 0.1], 30),
        ],
        "moderate" => moderate_objects(),
        "difficult" => vec![FixtureObject::straight(1, "Pedestrian", [0.8, 0.8, 1.7], [0.0, 0.0], [1.0, 0.0], 20)],
        other => return Err(SimError::UnknownFixture(other.to_string())),
    };
    let n_frames = tracks.iter().map(|t| t.positions.len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<Embedding> = tracks.iter().map(|t| identity_anchor(t.appearance, seed)).collect();
    let mut frames = Vec::with_capacity(n_frames);
    for frame in 0..n_frames {
        let mut ground_truth = Vec::new();
        let mut detections = Vec::new();
        for (k, t) in tracks.iter().enumerate() {
            let Some(&[x, y, yaw]) = t.positions.get(frame) else { continue };
            let [l, w, h] = t.dims;
            let bbox = Box3D::new(x, y, h / 2.0, l, w, h, yaw).expect("fixture box is valid");
            ground_truth.push(GtObject { object_id: t.id, category: t.category.into(), bbox });
            let source = t.swap_with.filter(|(f, _)| *f == frame).map_or(k, |(_, other)| other);
            detections.push(SimDetection {
                detection: Detection { bbox, score: 0.9, category: t.category.into() },
                object_id: Some(t.id),
                embedding: Some(perturb(&anchors[source], 0.05, &mut rng)),
            });
        }
        frames.push(ScenarioFrame { frame, ground_truth, detections });
    }
    Ok(Scenario { meta: ScenarioMeta { name: name.to_string(), seed, config: None }, frames })
}

struct FixtureObject {
    id: u64,
    /// Identity whose anchor embedding this object uses.
    appearance: u64,
    category: &'static str,
    dims: [f64; 3],
    /// Per-frame `(x, y, yaw)`.
    positions: Vec<[f64; 3]>,
    /// In this frame, take the appearance of the object at this index.
    swap_with: Option<(usize, usize)>,
}

impl FixtureObject {
    fn straight(id: u64, category: &'static str, dims: [f64; 3], start: [f64; 2], step: [f64; 2], n: usize) -> Self {
        let yaw = step[1].atan2(step[0]);
        let positions = (0..n).map(|f| [start[0] + step[0] * f as f64, start[1] + step[1] * f as f64, yaw]).collect();
        Self { id, appearance: id, category, dims, positions, swap_with: None }
    }
}

fn moderate_objects() -> Vec<FixtureObject> {
    let n = 30;
    let car = [4.2, 1.8, 1.5];
    // Two look-alike cars (same size, same appearance) 30 m apart.
    let a = FixtureObject::straight(1, "Car", car, [0.0, 0.0], [0.5, 0.0], n);
    let mut b = FixtureObject::straight(2, "Car", car, [0.0, 30.0], [0.5, 0.0], n);
    b.appearance = 1;
    // Two pedestrians in adjacent 0.5 m lanes walking toward each other at
    // 0.4 m per frame; they meet in frame 15 and both turn back.
    let walk = |dir: f64, y: f64| -> Vec<[f64; 3]> {
        (0..n)
            .map(|f| {
                let along = if f <= 15 { f as f64 } else { 30.0 - f as f64 };
                let x = -dir * (0.3 + 0.4 * 15.0) + dir * 0.4 * along;
                let forward = (f < 15) == (dir > 0.0);
                [x, y, if forward { 0.0 } else { PI }]
            })
            .collect()
    };
    let ped = |id: u64, dir: f64, y: f64| FixtureObject {
        id,
        appearance: id,
        category: "Pedestrian",
        dims: [0.8, 0.7, 1.75],
        positions: walk(dir, y),
        swap_with: None,
    };
    vec![a, b, ped(3, 1.0, -30.25), ped(4, -1.0, -29.75)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_detections_equal_ground_truth() {
        let s = generate(&SimConfig { n_objects: 6, n_frames: 10, ..SimConfig::default() }).unwrap();
        for f in &s.frames {
            assert_eq!(f.detections.len(), f.ground_truth.len());
            for d in &f.detections {
                let gt = f.ground_truth.iter().find(|g| Some(g.object_id) == d.object_id).unwrap();
                assert_eq!(gt.bbox, d.detection.bbox);
            }
        }
    }

    #[test]
    fn all_missed() {
        let s = generate(&SimConfig { p_miss: 1.0, ..SimConfig::default() }).unwrap();
        assert!(s.frames.iter().all(|f| f.detections.is_empty()));
    }

    #[test]
    fn clutter_count_matches_poisson() {
        let cfg = SimConfig { n_objects: 0, n_frames: 100, clutter_rate: 2.0, seed: 5, ..SimConfig::default() };
        let s = generate(&cfg).unwrap();
        let n: usize = s.frames.iter().map(|f| f.detections.len()).sum();
        // Poisson(200): σ = √200.
        assert!((n as f64 - 200.0).abs() <= 3.0 * 200f64.sqrt(), "{n}");
        assert!(s.frames.iter().flat_map(|f| &f.detections).all(|d| d.object_id.is_none()));
    }

    #[test]
    fn motion_never_teleports() {
        let cfg = SimConfig { n_objects: 8, n_frames: 40, turn_sigma: 0.2, seed: 3, ..SimConfig::default() };
        let s = generate(&cfg).unwrap();
        for w in s.frames.windows(2) {
            for (a, b) in w[0].ground_truth.iter().zip(&w[1].ground_truth) {
                let d = (a.bbox.x - b.bbox.x).hypot(a.bbox.y - b.bbox.y);
                assert!(d <= cfg.speed_max + 3.0 * cfg.turn_sigma + 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig { pos_sigma: 0.3, p_miss: 0.1, clutter_rate: 1.0, seed: 9, ..SimConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn oracle_embeddings_cluster_by_identity() {
        let s = generate(&SimConfig { n_objects: 4, n_frames: 5, ..SimConfig::default() }).unwrap();
        let e = oracle_embeddings(&s, 0.0, 1);
        let by_id = |id: u64| -> Vec<&Embedding> {
            s.frames
                .iter()
                .zip(&e)
                .flat_map(|(f, es)| f.detections.iter().zip(es))
                .filter(|(d, _)| d.object_id == Some(id))
                .map(|(_, e)| e)
                .collect()
        };
        let one = by_id(1);
        assert!(one.windows(2).all(|w| w[0] == w[1]));
        assert!(one[0].dot(by_id(2)[0]).abs() < 0.2);
        assert_eq!(e, oracle_embeddings(&s, 0.0, 1));
    }

    #[test]
    fn random_units_are_nearly_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<Embedding> = (0..200).map(|_| random_unit(EMBED_DIM, &mut rng)).collect();
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..v.len() {
            for j in (i + 1)..v.len().min(i + 11) {
                total += v[i].dot(&v[j]).abs();
                pairs += 1;
            }
        }
        assert!(total / (pairs as f64) < 0.1);
    }

    #[test]
    fn cuboid_patch_stays_in_inflated_box() {
        let b = Box3D::new(3.0, -2.0, 1.0, 4.0, 2.0, 1.5, 0.7).unwrap();
        let p = cuboid_patch(&b, 400, 3);
        assert_eq!(p.len(), 400);
        for r in p.points().rows() {
            assert!(r[0].abs() <= 1.1 * b.l / 2.0 && r[1].abs() <= 1.1 * b.w / 2.0 && r[2].abs() <= 1.1 * b.h / 2.0);
        }
        assert_eq!(p, cuboid_patch(&b, 400, 3));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = SimConfig { n_objects: 3, n_frames: 4, pos_sigma: 0.3, clutter_rate: 1.0, seed: 4, ..SimConfig::default() };
        let mut s = generate(&cfg).unwrap();
        let e = oracle_embeddings(&s, 0.3, 4);
        s.set_embeddings(e);
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf).unwrap();
        let back = Scenario::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn jsonl_schema_errors_name_the_line() {
        let err = Scenario::read_jsonl(r#"{"kind":"frame","frame":0,"ground_truth":[],"detections":[]}"#.as_bytes());
        assert!(matches!(err, Err(SimError::Schema { line: 1, .. })));
        let err = Scenario::read_jsonl("{\"kind\":\"meta\",\"name\":\"x\",\"seed\":1}\nnot json".as_bytes());
        assert!(matches!(err, Err(SimError::Parse { line: 2, .. })));
    }

    #[test]
    fn fixtures_exist_with_embeddings() {
        for name in FIXTURES {
            let s = fixture(name).unwrap();
            assert!(s.observations().is_ok(), "{name}");
        }
        assert!(fixture("nope").is_err());
    }
}
