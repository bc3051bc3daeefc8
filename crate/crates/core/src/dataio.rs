//! KITTI tracking rows, detection streams, trajectory files, run
//! configuration and text-prompt formatting.
//!
//! KITTI boxes live in the camera frame (x right, y down, z forward, `loc`
//! at the bottom face center). The tracker works in a right-handed ground
//! plane, mapped as
//!
//! ```text
//! x = loc_z    y = -loc_x    z = -loc_y + h/2    yaw = -rotation_y - pi/2
//! ```
//!
//! and inverted exactly on output.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::assoc::AssocConfig;
use crate::geom::{normalize_angle, Box3D};
use crate::kalman::KFConfig;
use crate::lgpenc::{TEST_POINTS, TRAIN_POINTS};
use crate::moteval::EvalConfig;
use crate::simkit::SimConfig;
use crate::tracker::{Detection, TrackOutput, TrackerConfig};
use crate::utcl::{LossConfig, ToyConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// One whitespace-separated KITTI tracking row (17 fields, 18 with score).
#[derive(Debug, Clone, PartialEq)]
pub struct KittiTrackRow {
    pub frame: usize,
    pub track_id: i64,
    pub category: String,
    pub truncated: i64,
    pub occluded: i64,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    /// Height, width, length in meters.
    pub dims: [f64; 3],
    /// Bottom-center location in camera coordinates.
    pub loc: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiTrackRow {
    /// Parses one row; `line` is only used in error messages.
    pub fn parse(text: &str, line: usize) -> Result<Self, DataError> {
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 17 && fields.len() != 18 {
            return Err(DataError::Parse { line, message: format!("expected 17 or 18 fields, found {}", fields.len()) });
        }
        let err = |name: &str, v: &str| DataError::Parse { line, message: format!("field `{name}` is not a number: {v:?}") };
        let int = |k: usize, name: &str| fields[k].parse::<i64>().map_err(|_| err(name, fields[k]));
        let float = |k: usize, name: &str| -> Result<f64, DataError> {
            let v = fields[k].parse::<f64>().map_err(|_| err(name, fields[k]))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DataError::Parse { line, message: format!("field `{name}` is not finite") })
            }
        };
        let frame = int(0, "frame")?;
        if frame < 0 {
            return Err(DataError::Parse { line, message: format!("negative frame {frame}") });
        }
        Ok(Self {
            frame: frame as usize,
            track_id: int(1, "track_id")?,
            category: fields[2].to_string(),
            truncated: int(3, "truncated")?,
            occluded: int(4, "occluded")?,
            alpha: float(5, "alpha")?,
            bbox2d: [float(6, "bbox_left")?, float(7, "bbox_top")?, float(8, "bbox_right")?, float(9, "bbox_bottom")?],
            dims: [float(10, "h")?, float(11, "w")?, float(12, "l")?],
            loc: [float(13, "x")?, float(14, "y")?, float(15, "z")?],
            rotation_y: float(16, "rotation_y")?,
            score: if fields.len() == 18 { Some(float(17, "score")?) } else { None },
        })
    }

    /// Ground-plane box of this row.
    pub fn to_box(&self) -> Result<Box3D, DataError> {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.loc;
        Box3D::new(z, -x, -y + h / 2.0, l, w, h, normalize_angle(-self.rotation_y - PI / 2.0))
            .map_err(|e| DataError::Parse { line: 0, message: e.to_string() })
    }

    /// Row for a tracker output: alpha −10 and an empty 2D box, as expected
    /// for 3D-only submissions.
    pub fn from_track(t: &TrackOutput) -> Self {
        let b = &t.bbox;
        Self {
            frame: t.frame,
            track_id: t.id as i64,
            category: t.category.clone(),
            truncated: 0,
            occluded: 0,
            alpha: -10.0,
            bbox2d: [0.0; 4],
            dims: [b.h, b.w, b.l],
            loc: [-b.y, -(b.z - b.h / 2.0), b.x],
            rotation_y: normalize_angle(-b.yaw - PI / 2.0),
            score: Some(t.score),
        }
    }
}

fn fixed(v: f64) -> String {
    let s = format!("{v:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

impl fmt::Display for KittiTrackRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {}", self.frame, self.track_id, self.category, self.truncated, self.occluded, fixed(self.alpha))?;
        for v in self.bbox2d.iter().chain(&self.dims).chain(&self.loc).chain([&self.rotation_y]) {
            write!(f, " {}", fixed(*v))?;
        }
        if let Some(s) = self.score {
            write!(f, " {}", fixed(s))?;
        }
        Ok(())
    }
}

/// Parses KITTI rows, skipping blank lines and `DontCare` entries.
pub fn parse_rows(input: impl BufRead) -> Result<Vec<KittiTrackRow>, DataError> {
    let mut rows = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse { line: k + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let row = KittiTrackRow::parse(&line, k + 1)?;
        if row.category != "DontCare" {
            row.to_box().map_err(|e| match e {
                DataError::Parse { message, .. } => DataError::Parse { line: k + 1, message },
                other => other,
            })?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Groups detection rows by frame; frames without rows are empty, so the
/// stream covers `0..=max_frame`. A missing score reads as 1.0.
pub fn parse_detections(input: impl BufRead) -> Result<Vec<Vec<Detection>>, DataError> {
    let rows = parse_rows(input)?;
    let n = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let mut frames = vec![Vec::new(); n];
    for r in rows {
        frames[r.frame].push(Detection { bbox: r.to_box()?, score: r.score.unwrap_or(1.0), category: r.category });
    }
    Ok(frames)
}

pub fn read_detections(path: &Path) -> Result<Vec<Vec<Detection>>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    parse_detections(BufReader::new(f))
}

/// Reads labeled rows (ground truth or tracker output) as track outputs.
pub fn read_tracks(path: &Path) -> Result<Vec<TrackOutput>, DataError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    parse_rows(BufReader::new(f))?
        .into_iter()
        .map(|r| {
            Ok(TrackOutput {
                frame: r.frame,
                id: u64::try_from(r.track_id)
                    .map_err(|_| DataError::Parse { line: 0, message: format!("negative track id {}", r.track_id) })?,
                bbox: r.to_box()?,
                score: r.score.unwrap_or(1.0),
                category: r.category,
            })
        })
        .collect()
}

/// KITTI submission text, rows sorted by `(frame, id)`.
pub fn format_tracks(tracks: &[TrackOutput]) -> String {
    let mut sorted: Vec<&TrackOutput> = tracks.iter().collect();
    sorted.sort_by_key(|t| (t.frame, t.id));
    let mut out = String::new();
    for t in sorted {
        out.push_str(&KittiTrackRow::from_track(t).to_string());
        out.push('\n');
    }
    out
}

pub fn write_tracks(tracks: &[TrackOutput], path: &Path) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(format_tracks(tracks).as_bytes()).map_err(io_err(path))
}

fn coord(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Text prompt describing an object's category and BEV corners.
pub fn format_text_prompt(category: &str, corners: &[[f64; 2]; 4]) -> String {
    let c: Vec<String> = corners.iter().map(|[x, y]| format!("({}, {})", coord(*x), coord(*y))).collect();
    format!(
        "The category of the object is {category}, and its location can be represented by four coordinates: {}, {}, {}, and {}.",
        c[0], c[1], c[2], c[3]
    )
}

/// Encoder settings used at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Points per patch when tracking.
    pub test_points: usize,
    /// Points per patch when training.
    pub train_points: usize,
    /// Seed of the initial parameters when no checkpoint is given.
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { test_points: TEST_POINTS, train_points: TRAIN_POINTS, init_seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct UtclConfig {
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub toy: ToyConfig,
}

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kalman: KFConfig,
    pub tracker: TrackerConfig,
    pub assoc: AssocConfig,
    pub lgpenc: EncoderConfig,
    pub utcl: UtclConfig,
    pub simkit: SimConfig,
    pub moteval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }

    /// Applies `dotted.key=value` overrides. The value is read as JSON and
    /// falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, DataError> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) =
                o.split_once('=').ok_or_else(|| DataError::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| DataError::Config(format!("unknown key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(root).map_err(|e| DataError::Config(e.to_string()))
    }
}
