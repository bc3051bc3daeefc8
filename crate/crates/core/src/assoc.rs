//! Track-to-detection cost matrices, geometric gating and assignment.
//!
//! Rows are tracks (predicted boxes), columns are detections.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Box3D, GeomError};
use crate::lgpenc::{self, Embedding, EncoderError};

/// Cost stored for pairs removed by the gate.
pub const INFEASIBLE: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssocError {
    #[error("{side}: {embeds} embeddings for {boxes} boxes")]
    LengthMismatch { side: &'static str, embeds: usize, boxes: usize },
    #[error("cost matrix data has {got} entries, expected {rows}×{cols}")]
    Shape { rows: usize, cols: usize, got: usize },
    #[error("feasible entry ({row}, {col}) has non-finite cost")]
    NonFiniteCost { row: usize, col: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Embedding(#[from] EncoderError),
    #[error("unknown association mode `{0}` (expected utr, utr+fgc, utr+cgc or geom-only)")]
    UnknownMode(String),
}

/// Which cost terms and which gate make up a matrix entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AssocMode {
    /// Appearance cost plus normalized center distance, gated at 1.
    #[default]
    #[serde(rename = "utr+fgc")]
    UtrFgc,
    /// Appearance cost only, no gate.
    #[serde(rename = "utr")]
    Utr,
    /// Appearance cost plus `1 − IoU`, gated at zero BEV overlap.
    #[serde(rename = "utr+cgc")]
    UtrCgc,
    /// `1 − IoU` only, gated at zero BEV overlap.
    #[serde(rename = "geom-only")]
    GeomOnly,
}

impl AssocMode {
    pub const ALL: [AssocMode; 4] = [AssocMode::Utr, AssocMode::UtrFgc, AssocMode::UtrCgc, AssocMode::GeomOnly];

    pub fn name(self) -> &'static str {
        match self {
            AssocMode::UtrFgc => "utr+fgc",
            AssocMode::Utr => "utr",
            AssocMode::UtrCgc => "utr+cgc",
            AssocMode::GeomOnly => "geom-only",
        }
    }

    pub fn uses_appearance(self) -> bool {
        !matches!(self, AssocMode::GeomOnly)
    }
}

impl fmt::Display for AssocMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AssocMode {
    type Err = AssocError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AssocMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AssocError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    #[default]
    Greedy,
    Hungarian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub mode: AssocMode,
    pub matcher: Matcher,
    /// Greedy matching never accepts an entry above this cost.
    pub max_cost: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self { mode: AssocMode::UtrFgc, matcher: Matcher::Greedy, max_cost: 1.5 }
    }
}

/// Dense row-major cost matrix with a feasibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    gate: Vec<bool>,
}

impl CostMatrix {
    /// Builds a matrix from row-major costs; infeasible entries may hold
    /// anything and are replaced by [`INFEASIBLE`].
    pub fn new(rows: usize, cols: usize, mut entries: Vec<f64>, gate: Vec<bool>) -> Result<Self, AssocError> {
        if entries.len() != rows * cols || gate.len() != rows * cols {
            return Err(AssocError::Shape { rows, cols, got: entries.len().min(gate.len()) });
        }
        for (k, (e, &ok)) in entries.iter_mut().zip(&gate).enumerate() {
            if !ok {
                *e = INFEASIBLE;
            } else if !e.is_finite() {
                return Err(AssocError::NonFiniteCost { row: k / cols.max(1), col: k % cols.max(1) });
            }
        }
        Ok(Self { rows, cols, entries, gate })
    }

    /// All entries feasible.
    pub fn dense(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self, AssocError> {
        Self::new(rows, cols, entries, vec![true; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn is_feasible(&self, row: usize, col: usize) -> bool {
        self.gate[row * self.cols + col]
    }

    /// Sum of the matched entries.
    pub fn total(&self, assignment: &Assignment) -> f64 {
        assignment.matches.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs in the order they were accepted.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    fn from_matches(matches: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &matches {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            matches,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }
}

/// Appearance + F-GAM matrix with the F-GAM gate (the default mode).
pub fn build_cost_matrix(
    track_embeds: &[Embedding],
    det_embeds: &[Embedding],
    predicted_boxes: &[Box3D],
    det_boxes: &[Box3D],
) -> Result<CostMatrix, AssocError> {
    build_cost_matrix_for(AssocMode::UtrFgc, track_embeds, det_embeds, predicted_boxes, det_boxes)
}

/// Cost matrix for any [`AssocMode`]. Embedding slices are ignored (and may
/// be empty) in geometry-only mode.
pub fn build_cost_matrix_for(
    mode: AssocMode,
    track_embeds: &[Embedding],
    det_embeds: &[Embedding],
    predicted_boxes: &[Box3D],
    det_boxes: &[Box3D],
) -> Result<CostMatrix, AssocError> {
    if mode.uses_appearance() {
        check_side("tracks", track_embeds.len(), predicted_boxes.len())?;
        check_side("detections", det_embeds.len(), det_boxes.len())?;
        for e in track_embeds.iter().chain(det_embeds) {
            lgpenc::utr_similarity_cost(e, e)?;
        }
    }
    for b in predicted_boxes.iter().chain(det_boxes) {
        b.validate()?;
    }

    let (rows, cols) = (predicted_boxes.len(), det_boxes.len());
    let mut entries = vec![INFEASIBLE; rows * cols];
    let mut gate = vec![false; rows * cols];
    for (r, pred) in predicted_boxes.iter().enumerate() {
        for (c, det) in det_boxes.iter().enumerate() {
            let k = r * cols + c;
            let appearance = || lgpenc::similarity_cost_unchecked(&track_embeds[r], &det_embeds[c]);
            let cost = match mode {
                AssocMode::UtrFgc => {
                    let cg = geom::fgam_unchecked(det, pred);
                    (cg <= 1.0).then(|| appearance() + cg)
                }
                AssocMode::Utr => Some(appearance()),
                AssocMode::UtrCgc => {
                    let iou = geom::bev_iou_unchecked(det, pred);
                    (iou > 0.0).then(|| appearance() + (1.0 - iou))
                }
                AssocMode::GeomOnly => {
                    let iou = geom::bev_iou_unchecked(det, pred);
                    (iou > 0.0).then_some(1.0 - iou)
                }
            };
            if let Some(cost) = cost {
                entries[k] = cost;
                gate[k] = true;
            }
        }
    }
    Ok(CostMatrix { rows, cols, entries, gate })
}

fn check_side(side: &'static str, embeds: usize, boxes: usize) -> Result<(), AssocError> {
    if embeds != boxes {
        return Err(AssocError::LengthMismatch { side, embeds, boxes });
    }
    Ok(())
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    row: usize,
    col: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.row.cmp(&other.row))
            .then(self.col.cmp(&other.col))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Repeatedly takes the globally cheapest feasible entry (ties by row, then
/// column) whose row and column are both still free and whose cost is at
/// most `max_cost`.
pub fn greedy_assign(c: &CostMatrix, max_cost: f64) -> Assignment {
    let mut heap: BinaryHeap<Reverse<Candidate>> = (0..c.rows)
        .flat_map(|row| (0..c.cols).map(move |col| (row, col)))
        .filter(|&(row, col)| c.is_feasible(row, col) && c.get(row, col) <= max_cost)
        .map(|(row, col)| Reverse(Candidate { cost: c.get(row, col), row, col }))
        .collect();
    let mut row_used = vec![false; c.rows];
    let mut col_used = vec![false; c.cols];
    let mut matches = Vec::new();
    let limit = c.rows.min(c.cols);
    while let Some(Reverse(Candidate { row, col, .. })) = heap.pop() {
        if row_used[row] || col_used[col] {
            continue;
        }
        row_used[row] = true;
        col_used[col] = true;
        matches.push((row, col));
        if matches.len() == limit {
            break;
        }
    }
    Assignment::from_matches(matches, c.rows, c.cols)
}

/// Optimal assignment: the largest number of feasible pairs, and among
/// those the minimum total cost.
pub fn hungarian_assign(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment::from_matches(Vec::new(), c.rows, c.cols);
    }
    // Infeasible pairs get a penalty larger than any feasible total, so
    // using one fewer of them always wins.
    let max_feasible = c
        .entries
        .iter()
        .zip(&c.gate)
        .filter(|(_, &ok)| ok)
        .fold(0.0f64, |m, (e, _)| m.max(e.abs()));
    let penalty = 1.0 + 2.0 * max_feasible * c.rows.min(c.cols) as f64;

    let transpose = c.rows > c.cols;
    let (n, m) = if transpose { (c.cols, c.rows) } else { (c.rows, c.cols) };
    let cost = |i: usize, j: usize| {
        let (r, col) = if transpose { (j, i) } else { (i, j) };
        if c.is_feasible(r, col) {
            c.get(r, col)
        } else {
            penalty
        }
    };
    let row_of_col = solve_rectangular(n, m, cost);

    let mut matches: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(j, &i)| i.map(|i| if transpose { (j, i) } else { (i, j) }))
        .filter(|&(r, col)| c.is_feasible(r, col))
        .collect();
    matches.sort_unstable();
    Assignment::from_matches(matches, c.rows, c.cols)
}

/// Shortest augmenting path with potentials on an `n × m` matrix, `n ≤ m`.
/// Returns, for each column, the row assigned to it.
fn solve_rectangular(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays; index 0 is the virtual start column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).map(|j| (p[j] != 0).then(|| p[j] - 1)).collect()
}
