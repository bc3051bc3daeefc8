//! CLEAR-MOT evaluation (MOTA, false positives, misses, identity switches)
//! with BEV center distance as the matching cost.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assoc::{hungarian_assign, CostMatrix};
use crate::geom::{centroid_distance, Box3D};
use crate::simkit::Scenario;
use crate::tracker::TrackOutput;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("ground truth is empty; MOTA is undefined")]
    EmptyGroundTruth,
    #[error("hypothesis frame {frame} lies outside the {n_frames} ground-truth frames")]
    FrameOutOfRange { frame: usize, n_frames: usize },
    #[error("match threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Maximum BEV center distance, meters, for a ground-truth/hypothesis match.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 2.0 }
    }
}

/// One labeled box: a ground-truth object or a hypothesis track state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Labeled {
    pub id: u64,
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mota: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub gt_count: usize,
    pub matches: usize,
    pub fp_rate: f64,
    pub miss_rate: f64,
}

impl EvalReport {
    fn from_counts(fp: usize, fn_: usize, idsw: usize, gt_count: usize, matches: usize) -> Self {
        let g = gt_count as f64;
        Self {
            mota: 1.0 - (fp + fn_ + idsw) as f64 / g,
            fp,
            fn_,
            idsw,
            gt_count,
            matches,
            fp_rate: fp as f64 / g,
            miss_rate: fn_ as f64 / g,
        }
    }

    /// Sums counts over sequences and recomputes the ratios.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
        let sum = |f: fn(&EvalReport) -> usize| reports.iter().map(f).sum::<usize>();
        let gt = sum(|r| r.gt_count);
        if gt == 0 {
            return Err(EvalError::EmptyGroundTruth);
        }
        Ok(Self::from_counts(sum(|r| r.fp), sum(|r| r.fn_), sum(|r| r.idsw), gt, sum(|r| r.matches)))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        writeln!(f, "{:<10} {:>10.4}", "MOTA", self.mota)?;
        writeln!(f, "{:<10} {:>10}", "FP", self.fp)?;
        writeln!(f, "{:<10} {:>10}", "FN", self.fn_)?;
        writeln!(f, "{:<10} {:>10}", "IDSW", self.idsw)?;
        writeln!(f, "{:<10} {:>10}", "GT", self.gt_count)?;
        writeln!(f, "{:<10} {:>10.4}", "FP rate", self.fp_rate)?;
        write!(f, "{:<10} {:>10.4}", "Miss rate", self.miss_rate)
    }
}

/// Per-frame `(gt_id, hyp_id)` correspondences.
pub type FrameMatches = Vec<(u64, u64)>;

/// CLEAR-MOT counts over aligned frames (missing hypothesis frames count
/// as empty).
pub fn evaluate(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Result<EvalReport, EvalError> {
    evaluate_detailed(gt, hyp, threshold).map(|(r, _)| r)
}

/// [`evaluate`] that also returns each frame's correspondences.
pub fn evaluate_detailed(
    gt: &[Vec<Labeled>],
    hyp: &[Vec<Labeled>],
    threshold: f64,
) -> Result<(EvalReport, Vec<FrameMatches>), EvalError> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(EvalError::InvalidThreshold(threshold));
    }
    let gt_count: usize = gt.iter().map(Vec::len).sum();
    if gt_count == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    if hyp.len() > gt.len() && hyp[gt.len()..].iter().any(|f| !f.is_empty()) {
        let frame = gt.len() + hyp[gt.len()..].iter().position(|f| !f.is_empty()).unwrap_or(0);
        return Err(EvalError::FrameOutOfRange { frame, n_frames: gt.len() });
    }

    let empty = Vec::new();
    let (mut fp, mut fn_, mut idsw, mut matched_total) = (0, 0, 0, 0);
    // Correspondences of the previous frame and the last hypothesis each
    // ground-truth object was ever matched to.
    let mut previous: HashMap<u64, u64> = HashMap::new();
    let mut last_hyp: HashMap<u64, u64> = HashMap::new();
    let mut per_frame = Vec::with_capacity(gt.len());

    for (t, gts) in gt.iter().enumerate() {
        let hyps = hyp.get(t).unwrap_or(&empty);
        let mut gt_taken = vec![false; gts.len()];
        let mut hyp_taken = vec![false; hyps.len()];
        let mut matches: FrameMatches = Vec::new();

        // Keep last frame's pairs that are still within the threshold.
        for (gi, g) in gts.iter().enumerate() {
            let Some(&h_id) = previous.get(&g.id) else { continue };
            if let Some(hi) = hyps.iter().position(|h| h.id == h_id) {
                if !hyp_taken[hi] && centroid_distance(&g.bbox, &hyps[hi].bbox) <= threshold {
                    gt_taken[gi] = true;
                    hyp_taken[hi] = true;
                    matches.push((g.id, h_id));
                }
            }
        }

        // Optimal assignment among the rest.
        let free_g: Vec<usize> = (0..gts.len()).filter(|&i| !gt_taken[i]).collect();
        let free_h: Vec<usize> = (0..hyps.len()).filter(|&i| !hyp_taken[i]).collect();
        if !free_g.is_empty() && !free_h.is_empty() {
            let mut entries = Vec::with_capacity(free_g.len() * free_h.len());
            let mut gate = Vec::with_capacity(free_g.len() * free_h.len());
            for &gi in &free_g {
                for &hi in &free_h {
                    let d = centroid_distance(&gts[gi].bbox, &hyps[hi].bbox);
                    entries.push(d);
                    gate.push(d <= threshold);
                }
            }
            let cm = CostMatrix::new(free_g.len(), free_h.len(), entries, gate).expect("shape is consistent");
            for (r, c) in hungarian_assign(&cm).matches {
                matches.push((gts[free_g[r]].id, hyps[free_h[c]].id));
            }
        }

        for &(g_id, h_id) in &matches {
            if last_hyp.insert(g_id, h_id).is_some_and(|prev| prev != h_id) {
                idsw += 1;
            }
        }
        fn_ += gts.len() - matches.len();
        fp += hyps.len() - matches.len();
        matched_total += matches.len();
        previous = matches.iter().copied().collect();
        matches.sort_unstable();
        per_frame.push(matches);
    }
    Ok((EvalReport::from_counts(fp, fn_, idsw, gt_count, matched_total), per_frame))
}

/// Ground-truth frames of a scenario.
pub fn scenario_ground_truth(s: &Scenario) -> Vec<Vec<Labeled>> {
    s.frames
        .iter()
        .map(|f| f.ground_truth.iter().map(|g| Labeled { id: g.object_id, bbox: g.bbox }).collect())
        .collect()
}

/// Groups tracker output rows into `n_frames` frames.
pub fn hypothesis_frames(rows: &[TrackOutput], n_frames: usize) -> Vec<Vec<Labeled>> {
    let n = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0).max(n_frames);
    let mut frames = vec![Vec::new(); n];
    for r in rows {
        frames[r.frame].push(Labeled { id: r.id, bbox: r.bbox });
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(id: u64, x: f64, y: f64) -> Labeled {
        Labeled { id, bbox: Box3D::bev(x, y, 4.0, 2.0, 0.0).unwrap() }
    }

    fn two_objects(n: usize) -> Vec<Vec<Labeled>> {
        (0..n).map(|t| vec![at(1, t as f64, 0.0), at(2, t as f64, 10.0)]).collect()
    }

    #[test]
    fn perfect_hypothesis() {
        let gt = two_objects(5);
        let r = evaluate(&gt, &gt, 2.0).unwrap();
        assert_eq!((r.mota, r.fp, r.fn_, r.idsw), (1.0, 0, 0, 0));
    }

    #[test]
    fn mota_formula() {
        let r = EvalReport::from_counts(1, 2, 1, 10, 7);
        assert!((r.mota - 0.6).abs() < 1e-12);
    }

    #[test]
    fn swapped_ids_count_two_switches() {
        let gt = two_objects(6);
        let hyp: Vec<Vec<Labeled>> = (0..6)
            .map(|t| {
                let (a, b) = if t < 3 { (7, 8) } else { (8, 7) };
                vec![at(a, t as f64, 0.0), at(b, t as f64, 10.0)]
            })
            .collect();
        let r = evaluate(&gt, &hyp, 2.0).unwrap();
        assert_eq!((r.idsw, r.fp, r.fn_), (2, 0, 0));
    }

    #[test]
    fn persisted_match_beats_closer_newcomer() {
        let gt: Vec<Vec<Labeled>> = vec![vec![at(1, 0.0, 0.0)], vec![at(1, 1.0, 0.0)]];
        let hyp = vec![vec![at(5, 0.5, 0.0)], vec![at(5, 2.5, 0.0), at(6, 1.0, 0.0)]];
        let (r, m) = evaluate_detailed(&gt, &hyp, 2.0).unwrap();
        assert_eq!(m[1], vec![(1, 5)]);
        assert_eq!((r.idsw, r.fp), (0, 1));
    }

    #[test]
    fn clutter_track_adds_only_false_positives() {
        let gt = two_objects(8);
        let base = evaluate(&gt, &gt, 2.0).unwrap();
        let mut hyp = gt.clone();
        for (t, f) in hyp.iter_mut().enumerate().take(5) {
            f.push(at(99, 100.0 + t as f64, 100.0));
        }
        let r = evaluate(&gt, &hyp, 2.0).unwrap();
        assert_eq!(r.fp, base.fp + 5);
        assert_eq!((r.fn_, r.idsw), (base.fn_, base.idsw));
    }

    #[test]
    fn errors() {
        assert_eq!(evaluate(&[vec![]], &[], 2.0), Err(EvalError::EmptyGroundTruth));
        assert!(evaluate(&two_objects(1), &[], 0.0).is_err());
        let hyp = vec![vec![], vec![at(1, 0.0, 0.0)]];
        assert!(matches!(evaluate(&two_objects(1), &hyp, 2.0), Err(EvalError::FrameOutOfRange { frame: 1, .. })));
    }

    #[test]
    fn merge_sums_counts() {
        let a = EvalReport::from_counts(1, 0, 0, 10, 10);
        let b = EvalReport::from_counts(0, 2, 1, 10, 8);
        let m = EvalReport::merge(&[a, b]).unwrap();
        assert_eq!((m.fp, m.fn_, m.idsw, m.gt_count), (1, 2, 1, 20));
        assert!((m.mota - 0.8).abs() < 1e-12);
        assert!(m.to_table().contains("MOTA"));
    }
}
