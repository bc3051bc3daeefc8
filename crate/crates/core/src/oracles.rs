//! Deliberately simple reference implementations used by the tests.
//!
//! Nothing here is tuned for speed; each function restates its target from
//! scratch with plain loops.

use crate::assoc::CostMatrix;
use crate::geom::Box3D;
use crate::lgpenc::EncoderParams;

/// Greedy matching by sorting every admissible entry by `(cost, row, col)`
/// and sweeping once.
pub fn greedy_sort_sweep(c: &CostMatrix, max_cost: f64) -> Vec<(usize, usize)> {
    let mut entries = Vec::new();
    for r in 0..c.rows() {
        for k in 0..c.cols() {
            if c.is_feasible(r, k) && c.get(r, k) <= max_cost {
                entries.push((c.get(r, k), r, k));
            }
        }
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut row_used = vec![false; c.rows()];
    let mut col_used = vec![false; c.cols()];
    let mut out = Vec::new();
    for (_, r, k) in entries {
        if !row_used[r] && !col_used[k] {
            row_used[r] = true;
            col_used[k] = true;
            out.push((r, k));
        }
    }
    out.sort_unstable();
    out
}

/// Best `(cardinality, total cost)` over all partial assignments using
/// feasible entries: largest cardinality first, then smallest cost.
pub fn brute_force_assignment(c: &CostMatrix) -> (usize, f64) {
    fn go(c: &CostMatrix, r: usize, used: &mut Vec<bool>, count: usize, cost: f64, best: &mut (usize, f64)) {
        if r == c.rows() {
            if count > best.0 || (count == best.0 && cost < best.1) {
                *best = (count, cost);
            }
            return;
        }
        go(c, r + 1, used, count, cost, best);
        for k in 0..c.cols() {
            if !used[k] && c.is_feasible(r, k) {
                used[k] = true;
                go(c, r + 1, used, count + 1, cost + c.get(r, k), best);
                used[k] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(c, 0, &mut vec![false; c.cols()], 0, 0.0, &mut best);
    best
}

/// IoU of two footprints with yaw 0, from interval overlaps.
pub fn axis_aligned_iou(a: &Box3D, b: &Box3D) -> f64 {
    let overlap = |c1: f64, s1: f64, c2: f64, s2: f64| {
        let lo = (c1 - s1 / 2.0).max(c2 - s2 / 2.0);
        let hi = (c1 + s1 / 2.0).min(c2 + s2 / 2.0);
        (hi - lo).max(0.0)
    };
    let inter = overlap(a.x, a.l, b.x, b.l) * overlap(a.y, a.w, b.y, b.w);
    inter / (a.l * a.w + b.l * b.w - inter)
}

/// Encoder forward pass written as explicit loops over points and
/// channels.
pub fn naive_encode(points: &[[f64; 3]], p: &EncoderParams) -> Vec<f64> {
    let layer = |input: &Vec<Vec<f64>>, w: &ndarray::Array2<f64>, b: &ndarray::Array1<f64>, relu: bool| {
        input
            .iter()
            .map(|x| {
                (0..w.ncols())
                    .map(|o| {
                        let mut s = b[o];
                        for i in 0..w.nrows() {
                            s += x[i] * w[[i, o]];
                        }
                        if relu && s < 0.0 {
                            0.0
                        } else {
                            s
                        }
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<Vec<f64>>>()
    };
    let mut h: Vec<Vec<f64>> = points.iter().map(|q| q.to_vec()).collect();
    let mut l2 = Vec::new();
    for (k, d) in p.feat.iter().enumerate() {
        h = layer(&h, &d.weight, &d.bias, true);
        if k == 1 {
            l2 = h.clone();
        }
    }
    let concat: Vec<Vec<f64>> = l2.iter().zip(&h).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    let width = concat[0].len();

    let mut pooled = vec![f64::NEG_INFINITY; width];
    for row in &concat {
        for j in 0..width {
            if row[j] > pooled[j] {
                pooled[j] = row[j];
            }
        }
    }

    let mut w = layer(&l2, &p.attn.weight, &p.attn.bias, false);
    for row in &mut w {
        for v in row.iter_mut() {
            *v = if *v > 30.0 { *v } else { v.exp().ln_1p() };
        }
    }
    let mut attended = vec![0.0; width];
    for (row, wr) in concat.iter().zip(&w) {
        let mut denom: f64 = wr.iter().sum();
        if denom.abs() < 1e-12 {
            denom += 1e-12;
        }
        for j in 0..width {
            attended[j] += row[j] * wr[j] / denom;
        }
    }

    let fused: Vec<f64> = (0..width).map(|j| p.alpha[j] * attended[j] + p.beta[j] * pooled[j]).collect();
    let raw = &layer(&vec![fused], &p.fusion.weight, &p.fusion.bias, false)[0];
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| v / norm).collect()
}

/// Constant-velocity filter on one axis: state `(position, velocity)`,
/// process noise `diag(q_pos, q_vel)`, measurement noise `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarKf {
    pub x: [f64; 2],
    pub p: [[f64; 2]; 2],
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
}

impl ScalarKf {
    pub fn new(z0: f64, p_pos: f64, p_vel: f64, q_pos: f64, q_vel: f64, r: f64) -> Self {
        Self { x: [z0, 0.0], p: [[p_pos, 0.0], [0.0, p_vel]], q_pos, q_vel, r }
    }

    pub fn predict(&mut self) {
        let [x, v] = self.x;
        self.x = [x + v, v];
        let [[a, b], [c, d]] = self.p;
        // F P Fᵀ with F = [[1, 1], [0, 1]].
        self.p = [[a + b + c + d + self.q_pos, b + d], [c + d, d + self.q_vel]];
    }

    pub fn update(&mut self, z: f64) {
        let [[a, b], [c, d]] = self.p;
        let s = a + self.r;
        let (k0, k1) = (a / s, c / s);
        let y = z - self.x[0];
        self.x = [self.x[0] + k0 * y, self.x[1] + k1 * y];
        self.p = [[(1.0 - k0) * a, (1.0 - k0) * b], [c - k1 * a, d - k1 * b]];
    }
}
