//! Oriented-box geometry in the bird's-eye-view (BEV) ground plane.
//!
//! Boxes are centered, with `l` along the heading and `w` across it. The
//! ground plane is right-handed (x forward, y left) and `yaw` is measured
//! counter-clockwise from +x.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Intersections smaller than this (m²) are reported as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("invalid box: dimensions must be positive and finite (l={l}, w={w}, h={h})")]
    InvalidDims { l: f64, w: f64, h: f64 },
    #[error("invalid box: non-finite pose")]
    NonFinitePose,
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Oriented 3D bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    /// Builds a validated box; `yaw` is wrapped into `(-π, π]`.
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self, GeomError> {
        let b = Self { x, y, z, l, w, h, yaw: normalize_angle(yaw) };
        b.validate()?;
        Ok(b)
    }

    /// Flat box on the ground plane, handy for BEV-only work.
    pub fn bev(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Result<Self, GeomError> {
        Self::new(x, y, 0.0, l, w, 1.0, yaw)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let dims_ok = [self.l, self.w, self.h].iter().all(|d| d.is_finite() && *d > 0.0);
        if !dims_ok {
            return Err(GeomError::InvalidDims { l: self.l, w: self.w, h: self.h });
        }
        if ![self.x, self.y, self.z, self.yaw].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinitePose);
        }
        Ok(())
    }

    pub fn center_bev(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    /// BEV footprint diagonal `‖(l, w)‖`.
    pub fn bev_diagonal(&self) -> f64 {
        self.l.hypot(self.w)
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    /// Maps a world-frame BEV point into this box's frame (centered, yaw-aligned).
    pub fn to_object_frame(&self, px: f64, py: f64) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Flexible geometric alignment cost, a dimensionless value ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GeomCost(pub f64);

impl GeomCost {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// BEV center distance normalized by the smaller of the two footprint
/// diagonals. Symmetric; ignores `z`, `h` and `yaw`.
pub fn fgam(det: &Box3D, pred_track: &Box3D) -> Result<GeomCost, GeomError> {
    det.validate()?;
    pred_track.validate()?;
    Ok(GeomCost(fgam_unchecked(det, pred_track)))
}

/// [`fgam`] for boxes already known to be valid.
#[inline]
pub(crate) fn fgam_unchecked(a: &Box3D, b: &Box3D) -> f64 {
    let dist = (a.x - b.x).hypot(a.y - b.y);
    dist / a.bev_diagonal().min(b.bev_diagonal())
}

/// A pair is a potential match unless the cost exceeds 1.
pub fn is_compatible(c: GeomCost) -> bool {
    c.0 <= 1.0
}

/// BEV Euclidean distance between centers.
pub fn centroid_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Footprint corners, counter-clockwise starting at front-left.
pub fn bev_corners(b: &Box3D) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hl = b.l / 2.0;
    let hw = b.w / 2.0;
    // Object-frame corners: front-left, rear-left, rear-right, front-right.
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[u, v]| [b.x + c * u - s * v, b.y + s * u + c * v])
}

/// Intersection-over-union of the two BEV footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64, GeomError> {
    a.validate()?;
    b.validate()?;
    Ok(bev_iou_unchecked(a, b))
}

pub(crate) fn bev_iou_unchecked(a: &Box3D, b: &Box3D) -> f64 {
    // Cheap rejection on the circumscribed circles.
    let reach = (a.bev_diagonal() + b.bev_diagonal()) / 2.0;
    if centroid_distance(a, b) >= reach {
        return 0.0;
    }
    let inter = polygon_area(&clip_convex(&bev_corners(a), &bev_corners(b)));
    if inter < MIN_INTERSECTION_AREA {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    twice.abs() / 2.0
}

/// Sutherland–Hodgman: clips `subject` against the convex, counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let side = |p: [f64; 2]| (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0]);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let s_cur = side(cur);
            let s_prev = side(prev);
            if s_cur >= 0.0 {
                if s_prev < 0.0 {
                    output.push(intersect(prev, cur, s_prev, s_cur));
                }
                output.push(cur);
            } else if s_prev >= 0.0 {
                output.push(intersect(prev, cur, s_prev, s_cur));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}
