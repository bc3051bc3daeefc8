use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderError, POINT_DIM};
use crate::geom::Box3D;

/// Object-frame point patch, `N × 3`, `N ≥ 1`, all coordinates finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPatch {
    points: Array2<f64>,
}

impl PointPatch {
    pub fn new(points: Array2<f64>) -> Result<Self, EncoderError> {
        if points.ncols() != POINT_DIM {
            return Err(EncoderError::PatchWidth(points.ncols()));
        }
        if points.nrows() == 0 {
            return Err(EncoderError::EmptyPatch);
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinitePatch);
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self, EncoderError> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), POINT_DIM), flat).expect("rows are 3 wide");
        Self::new(points)
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Full-frame point cloud in world coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

/// Crops the points inside `bbox`, moves them into the box frame (centered,
/// heading along +x) and resamples to exactly `n_target` points: without
/// replacement when enough points are inside, with replacement otherwise.
pub fn crop_and_resample(
    cloud: &PointCloud,
    bbox: &Box3D,
    n_target: usize,
    seed: u64,
) -> Result<PointPatch, EncoderError> {
    assert!(n_target >= 1, "n_target must be at least 1");
    let inside: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .filter_map(|&[px, py, pz]| {
            let [u, v] = bbox.to_object_frame(px, py);
            let w = pz - bbox.z;
            let within = u.abs() <= bbox.l / 2.0 && v.abs() <= bbox.w / 2.0 && w.abs() <= bbox.h / 2.0;
            within.then_some([u, v, w])
        })
        .collect();
    if inside.is_empty() {
        return Err(EncoderError::EmptyPatch);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<[f64; 3]> = if inside.len() >= n_target {
        index::sample(&mut rng, inside.len(), n_target).into_iter().map(|i| inside[i]).collect()
    } else {
        (0..n_target).map(|_| inside[rng.random_range(0..inside.len())]).collect()
    };
    PointPatch::from_rows(&rows)
}
