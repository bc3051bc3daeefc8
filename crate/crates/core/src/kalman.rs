//! Constant-velocity 3D Kalman filter in the AB3DMOT layout.
//!
//! State: `(x, y, z, yaw, l, w, h, vx, vy, vz)`, velocities in meters per
//! frame. Measurement: the first seven components.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, Box3D};

pub const STATE_DIM: usize = 10;
pub const MEAS_DIM: usize = 7;

pub type StateVec = SVector<f64, STATE_DIM>;
pub type StateCov = SMatrix<f64, STATE_DIM, STATE_DIM>;
type MeasVec = SVector<f64, MEAS_DIM>;
type MeasCov = SMatrix<f64, MEAS_DIM, MEAS_DIM>;
type Gain = SMatrix<f64, STATE_DIM, MEAS_DIM>;

/// Smallest length/width/height a predicted box may report.
const MIN_DIM: f64 = 1e-3;
/// Base prior variance on the pose block at track birth.
const INITIAL_POSE_VAR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("measurement contains non-finite values")]
    NonFiniteMeasurement,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("invalid filter config: {0}")]
    InvalidConfig(&'static str),
}

/// Noise multipliers. Defaults reproduce the AB3DMOT filter: Q is identity
/// on the pose block and `process_noise_scale · I` on the velocity block,
/// R = `measurement_noise_scale · I`, and the birth covariance is `10 · I`
/// with the velocity block further inflated by `initial_velocity_cov`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KFConfig {
    pub process_noise_scale: f64,
    pub measurement_noise_scale: f64,
    pub initial_velocity_cov: f64,
}

impl Default for KFConfig {
    fn default() -> Self {
        Self { process_noise_scale: 0.01, measurement_noise_scale: 1.0, initial_velocity_cov: 1000.0 }
    }
}

impl KFConfig {
    pub fn validate(&self) -> Result<(), KalmanError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.process_noise_scale) {
            return Err(KalmanError::InvalidConfig("process_noise_scale must be > 0"));
        }
        if !ok(self.measurement_noise_scale) {
            return Err(KalmanError::InvalidConfig("measurement_noise_scale must be > 0"));
        }
        if !ok(self.initial_velocity_cov) {
            return Err(KalmanError::InvalidConfig("initial_velocity_cov must be > 0"));
        }
        Ok(())
    }

    fn process_noise(&self) -> StateCov {
        let mut q = StateCov::identity();
        for i in MEAS_DIM..STATE_DIM {
            q[(i, i)] = self.process_noise_scale;
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFState {
    pub mean: StateVec,
    pub cov: StateCov,
}

impl KFState {
    /// Box view of the state. Dimensions are floored at a millimeter so the
    /// result is always a valid box.
    pub fn to_box(&self) -> Box3D {
        let m = &self.mean;
        Box3D {
            x: m[0],
            y: m[1],
            z: m[2],
            yaw: normalize_angle(m[3]),
            l: m[4].max(MIN_DIM),
            w: m[5].max(MIN_DIM),
            h: m[6].max(MIN_DIM),
        }
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.mean[7], self.mean[8], self.mean[9]]
    }
}

/// Filter with a fixed configuration; the matrices are built once.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    config: KFConfig,
    transition: StateCov,
    process_noise: StateCov,
    measurement_noise: MeasCov,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        Self::new(KFConfig::default()).expect("default config is valid")
    }
}

impl KalmanFilter {
    pub fn new(config: KFConfig) -> Result<Self, KalmanError> {
        config.validate()?;
        let mut transition = StateCov::identity();
        for i in 0..3 {
            transition[(i, i + MEAS_DIM)] = 1.0;
        }
        Ok(Self {
            config,
            transition,
            process_noise: config.process_noise(),
            measurement_noise: MeasCov::identity() * config.measurement_noise_scale,
        })
    }

    pub fn config(&self) -> &KFConfig {
        &self.config
    }

    pub fn init(&self, det: &Box3D) -> KFState {
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<MEAS_DIM>(0).copy_from(&measurement(det));
        let mut cov = StateCov::identity() * INITIAL_POSE_VAR;
        for i in MEAS_DIM..STATE_DIM {
            cov[(i, i)] *= self.config.initial_velocity_cov;
        }
        KFState { mean, cov }
    }

    pub fn predict(&self, s: &KFState) -> KFState {
        let f = &self.transition;
        let mut mean = f * s.mean;
        mean[3] = normalize_angle(mean[3]);
        let cov = symmetrize(f * s.cov * f.transpose() + self.process_noise);
        KFState { mean, cov }
    }

    pub fn update(&self, s: &KFState, z: &Box3D) -> Result<KFState, KalmanError> {
        let mut zv = measurement(z);
        if zv.iter().any(|v| !v.is_finite()) {
            return Err(KalmanError::NonFiniteMeasurement);
        }
        zv[3] = s.mean[3] + yaw_innovation(s.mean[3], zv[3]);

        // H selects the first seven state components, so H·P, P·Hᵀ and
        // H·P·Hᵀ are plain sub-blocks.
        let p = &s.cov;
        let p_ht: Gain = p.fixed_columns::<MEAS_DIM>(0).into_owned();
        let innovation_cov: MeasCov = p.fixed_view::<MEAS_DIM, MEAS_DIM>(0, 0) + self.measurement_noise;
        let inv = innovation_cov.try_inverse().ok_or(KalmanError::SingularInnovation)?;
        let gain: Gain = p_ht * inv;

        let innovation = zv - s.mean.fixed_rows::<MEAS_DIM>(0);
        let mut mean = s.mean + gain * innovation;
        mean[3] = normalize_angle(mean[3]);

        // Joseph form keeps the covariance PSD under rounding.
        let mut i_kh = StateCov::identity();
        let mut kh = i_kh.fixed_columns_mut::<MEAS_DIM>(0);
        kh -= &gain;
        let cov = symmetrize(i_kh * p * i_kh.transpose() + gain * self.measurement_noise * gain.transpose());
        Ok(KFState { mean, cov })
    }
}

fn measurement(b: &Box3D) -> MeasVec {
    MeasVec::from([b.x, b.y, b.z, b.yaw, b.l, b.w, b.h])
}

/// Yaw innovation with orientation correction: a measurement pointing the
/// opposite way is flipped by π, so the result lies in `(-π/2, π/2]`.
pub fn yaw_innovation(predicted: f64, measured: f64) -> f64 {
    let mut d = normalize_angle(measured - predicted);
    if d > FRAC_PI_2 {
        d -= PI;
    } else if d <= -FRAC_PI_2 {
        d += PI;
    }
    d
}

fn symmetrize(m: StateCov) -> StateCov {
    (m + m.transpose()) * 0.5
}
