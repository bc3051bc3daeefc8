//! Central finite-difference check of [`total_loss`] gradients on small
//! random batches.
//!
//! Each trial draws a batch (B ≤ 4, N ≤ 16), random parameters and loss
//! weights, then compares the analytic directional derivative along a random
//! unit direction per tensor (and along `log τ`) with
//! `(L(θ + h·d) − L(θ − h·d)) / 2h`. The relative error is
//! `|a − n| / max(|a|, |n|, 1e−6)`.
//!
//! The loss is only piecewise smooth (ReLU, max-pooling, hardest-example
//! selection, hinge). When a probe at `θ ± h·d` takes a different branch
//! than `θ`, the step straddles a kink and the plain central difference does
//! not estimate the gradient. Those probes are differenced on the branch
//! recorded at `θ` instead (masks, pool winners and triplet choices held
//! fixed), a smooth function that equals the loss near `θ`, and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::loss::{evaluate, total_loss};
use super::{LossConfig, TriModalBatch, UtclError};
use crate::lgpenc::{EncoderParams, PointPatch, EMBED_DIM};
use crate::simkit::{mix, random_unit};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub trial: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Whether the step crossed a kink and was differenced on the fixed
    /// branch.
    pub on_branch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Probe with the largest relative error.
    pub worst: Option<Probe>,
    pub probes: usize,
    /// Probes whose step crossed a kink.
    pub kink_probes: usize,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_patch(n: usize, rng: &mut impl Rng) -> PointPatch {
    let rows: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal))).collect();
    PointPatch::from_rows(&rows).expect("normal samples are finite")
}

/// Random batch, parameters, loss config and `log τ` for one trial.
pub fn random_problem(seed: u64) -> (TriModalBatch, EncoderParams, LossConfig, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(1..=4);
    let n = rng.random_range(2..=16);
    let patches = |rng: &mut ChaCha8Rng| (0..b).map(|_| random_patch(n, rng)).collect::<Vec<_>>();
    let anchors = patches(&mut rng);
    let positives = patches(&mut rng);
    let negatives = patches(&mut rng);
    let images = (0..b).map(|_| random_unit(EMBED_DIM, &mut rng)).collect();
    let texts = (0..b).map(|_| random_unit(EMBED_DIM, &mut rng)).collect();
    let batch = TriModalBatch { anchors, images, texts, positives, negatives };

    let mut params = EncoderParams::init(rng.random());
    // Move fusion coefficients and biases off their initial constants so
    // every term contributes.
    for (name, t) in params.tensors_mut() {
        if name.ends_with("bias") || name == "alpha" || name == "beta" {
            let base = if name.ends_with("bias") { 0.0 } else { 1.0 };
            t.iter_mut().for_each(|v| *v = base + rng.random_range(-0.5..0.5));
        }
    }
    let cfg = LossConfig {
        gamma: rng.random_range(0.5..1.5),
        delta: rng.random_range(0.5..1.5),
        epsilon: rng.random_range(0.0..0.5),
        tau: 0.07,
    };
    let log_tau = rng.random_range(0.05f64..1.0).ln();
    (batch, params, cfg, log_tau)
}

fn unit_direction(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Checks one trial and returns a probe per tensor plus one for `log τ`.
pub fn check_trial(trial: usize, seed: u64) -> Result<Vec<Probe>, UtclError> {
    let (batch, params, cfg, log_tau) = random_problem(mix(seed, trial as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, trial as u64), 0xd1));
    let out = total_loss(&batch, &params, &cfg, log_tau)?;
    let (_, center) = evaluate(&batch, &params, &cfg, log_tau, None)?;
    let mut probes = Vec::new();

    let grad_tensors = out.grads.tensors();
    for (k, (name, t)) in params.tensors().into_iter().enumerate() {
        let dir = unit_direction(t.len(), &mut rng);
        let shifted = |sign: f64, branch| -> Result<(f64, _), UtclError> {
            let mut p = params.clone();
            p.tensors_mut()[k].1.iter_mut().zip(&dir).for_each(|(v, d)| *v += sign * STEP * d);
            evaluate(&batch, &p, &cfg, log_tau, branch)
        };
        let (mut plus, bp) = shifted(1.0, None)?;
        let (mut minus, bm) = shifted(-1.0, None)?;
        let on_branch = bp != center || bm != center;
        if on_branch {
            plus = shifted(1.0, Some(&center))?.0;
            minus = shifted(-1.0, Some(&center))?.0;
        }
        let analytic: f64 = grad_tensors[k].1.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let numeric = (plus - minus) / (2.0 * STEP);
        probes.push(Probe {
            trial,
            tensor: name.to_string(),
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
            on_branch,
        });
    }

    // No discrete choice depends on the temperature.
    let numeric = (evaluate(&batch, &params, &cfg, log_tau + STEP, None)?.0
        - evaluate(&batch, &params, &cfg, log_tau - STEP, None)?.0)
        / (2.0 * STEP);
    probes.push(Probe {
        trial,
        tensor: "log_tau".into(),
        analytic: out.d_log_tau,
        numeric,
        rel_error: rel_error(out.d_log_tau, numeric),
        on_branch: false,
    });
    Ok(probes)
}

pub fn gradcheck(trials: usize, seed: u64) -> Result<GradcheckReport, UtclError> {
    let mut worst: Option<Probe> = None;
    let (mut probes, mut kink_probes) = (0, 0);
    for trial in 0..trials {
        for p in check_trial(trial, seed)? {
            probes += 1;
            kink_probes += usize::from(p.on_branch);
            if worst.as_ref().is_none_or(|w| p.rel_error > w.rel_error || p.rel_error.is_nan()) {
                worst = Some(p);
            }
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradcheckReport { trials, seed, max_rel_error, worst, probes, kink_probes, passed: max_rel_error < TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn few_trials_pass() {
        let r = gradcheck(3, 1).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
