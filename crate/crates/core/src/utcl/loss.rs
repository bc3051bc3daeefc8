use ndarray::{Array2, ArrayView2};

use super::{LossConfig, TriModalBatch, UtclError};
use crate::lgpenc::{self, Embedding, EncoderParams, ForwardCache, EMBED_DIM};

/// Value and gradients of a loss over row-stacked embeddings.
#[derive(Debug, Clone)]
pub(crate) struct PairGrads {
    pub loss: f64,
    pub d_left: Array2<f64>,
    pub d_right: Array2<f64>,
}

fn stack(items: &[Embedding]) -> Result<Array2<f64>, UtclError> {
    let dim = items.first().map_or(0, Embedding::dim);
    if items.iter().any(|e| e.dim() != dim) {
        return Err(UtclError::Shape("embeddings in one batch differ in dimension".into()));
    }
    let flat: Vec<f64> = items.iter().flat_map(|e| e.as_slice().iter().copied()).collect();
    Ok(Array2::from_shape_vec((items.len(), dim), flat).expect("rows share one dimension"))
}

fn check_pair(p: &[Embedding], f: &[Embedding]) -> Result<(), UtclError> {
    if p.is_empty() {
        return Err(UtclError::Shape("batch is empty".into()));
    }
    if p.len() != f.len() {
        return Err(UtclError::Shape(format!("batch sizes differ: {} vs {}", p.len(), f.len())));
    }
    if p[0].dim() != f[0].dim() {
        return Err(UtclError::Shape(format!("embedding dims differ: {} vs {}", p[0].dim(), f[0].dim())));
    }
    Ok(())
}

/// Symmetric InfoNCE over matched pairs `(p_i, f_i)`, averaged over the batch.
pub fn cc_loss(p: &[Embedding], f: &[Embedding], tau: f64) -> Result<f64, UtclError> {
    check_pair(p, f)?;
    check_tau(tau)?;
    Ok(cc_grad(stack(p)?.view(), stack(f)?.view(), tau).0.loss)
}

/// Batch-hard triplet loss with cosine distance `1 − a·b`.
pub fn triplet_loss(
    anchors: &[Embedding],
    positives: &[Embedding],
    negatives: &[Embedding],
    epsilon: f64,
) -> Result<f64, UtclError> {
    check_pair(anchors, positives)?;
    check_pair(anchors, negatives)?;
    Ok(triplet_grad(stack(anchors)?.view(), stack(positives)?.view(), stack(negatives)?.view(), epsilon).0)
}

pub(crate) fn check_tau(tau: f64) -> Result<(), UtclError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(UtclError::InvalidConfig(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Loss, gradients w.r.t. both sides, and `dL/dτ`.
pub(crate) fn cc_grad(p: ArrayView2<f64>, f: ArrayView2<f64>, tau: f64) -> (PairGrads, f64) {
    let b = p.nrows();
    let s = p.dot(&f.t()) / tau;
    let row_lse: Vec<f64> = (0..b).map(|i| log_sum_exp(s.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..b).map(|k| log_sum_exp(s.column(k).iter().copied())).collect();

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        loss += 0.5 * (row_lse[i] - s[[i, i]]) + 0.5 * (col_lse[i] - s[[i, i]]);
        for k in 0..b {
            let row_sm = (s[[i, k]] - row_lse[i]).exp();
            let col_sm = (s[[i, k]] - col_lse[k]).exp();
            let delta = if i == k { 1.0 } else { 0.0 };
            g[[i, k]] = inv_b * (0.5 * (row_sm - delta) + 0.5 * (col_sm - delta));
        }
    }
    let d_tau = -(&g * &s).sum() / tau;
    let d_left = g.dot(&f) / tau;
    let d_right = g.t().dot(&p) / tau;
    (PairGrads { loss: loss * inv_b, d_left, d_right }, d_tau)
}

fn first_extreme(v: impl Iterator<Item = f64>, better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = (0, f64::NAN);
    for (k, x) in v.enumerate() {
        if k == 0 || better(x, best.1) {
            best = (k, x);
        }
    }
    best
}

/// Triplet loss value and gradients for anchors, positives and negatives.
/// Ties in the hardest positive/negative go to the lowest index.
pub(crate) fn triplet_grad(
    a: ArrayView2<f64>,
    p: ArrayView2<f64>,
    n: ArrayView2<f64>,
    epsilon: f64,
) -> (f64, Array2<f64>, Array2<f64>, Array2<f64>) {
    let b = a.nrows();
    let inv_b = 1.0 / b as f64;
    let dist_p = 1.0 - a.dot(&p.t());
    let dist_n = 1.0 - a.dot(&n.t());
    let mut loss = 0.0;
    let mut da = Array2::zeros(a.raw_dim());
    let mut dp = Array2::zeros(p.raw_dim());
    let mut dn = Array2::zeros(n.raw_dim());
    for i in 0..b {
        let (kp, hardest_p) = first_extreme(dist_p.row(i).iter().copied(), |x, best| x > best);
        let (kn, hardest_n) = first_extreme(dist_n.row(i).iter().copied(), |x, best| x < best);
        let hinge = hardest_p - hardest_n + epsilon;
        if hinge > 0.0 {
            loss += hinge * inv_b;
            // d(1 − a·p)/da = −p, d(1 − a·p)/dp = −a.
            da.row_mut(i).scaled_add(-inv_b, &p.row(kp));
            da.row_mut(i).scaled_add(inv_b, &n.row(kn));
            dp.row_mut(kp).scaled_add(-inv_b, &a.row(i));
            dn.row_mut(kn).scaled_add(inv_b, &a.row(i));
        }
    }
    (loss, da, dp, dn)
}

/// Loss breakdown for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub image: f64,
    pub text: f64,
    pub positive: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Total loss with gradients for the encoder and for `log τ`.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grads: EncoderParams,
    pub d_log_tau: f64,
}

struct Encoded {
    caches: Vec<ForwardCache>,
    matrix: Array2<f64>,
}

fn encode_all(patches: &[lgpenc::PointPatch], params: &EncoderParams) -> Result<Encoded, UtclError> {
    let mut caches = Vec::with_capacity(patches.len());
    let mut matrix = Array2::zeros((patches.len(), EMBED_DIM));
    for (k, patch) in patches.iter().enumerate() {
        let cache = lgpenc::forward_unchecked(patch.points(), params)?;
        matrix.row_mut(k).assign(&cache.output);
        caches.push(cache);
    }
    Ok(Encoded { caches, matrix })
}

fn check_batch(batch: &TriModalBatch) -> Result<(), UtclError> {
    let b = batch.anchors.len();
    if b == 0 {
        return Err(UtclError::Shape("batch is empty".into()));
    }
    let lens = [batch.positives.len(), batch.negatives.len(), batch.images.len(), batch.texts.len()];
    if lens.iter().any(|&l| l != b) {
        return Err(UtclError::Shape(format!("batch parts have lengths {b} and {lens:?}")));
    }
    if let Some(e) = batch.images.iter().chain(&batch.texts).find(|e| e.dim() != EMBED_DIM) {
        return Err(UtclError::Shape(format!("image/text embeddings must have {EMBED_DIM} dims, found {}", e.dim())));
    }
    Ok(())
}

fn terms_and_upstreams(
    batch: &TriModalBatch,
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    cfg: &LossConfig,
    tau: f64,
) -> Result<(LossTerms, [Array2<f64>; 3], f64), UtclError> {
    let images = stack(&batch.images)?;
    let texts = stack(&batch.texts)?;
    let (img, dt_img) = cc_grad(anchors, images.view(), tau);
    let (txt, dt_txt) = cc_grad(anchors, texts.view(), tau);
    let (pos, dt_pos) = cc_grad(anchors, positives, tau);
    let (tri, tri_a, tri_p, tri_n) = triplet_grad(anchors, positives, negatives, cfg.epsilon);

    let (g, d) = (cfg.gamma, cfg.delta);
    let terms = LossTerms {
        image: img.loss,
        text: txt.loss,
        positive: pos.loss,
        triplet: tri,
        total: g * (img.loss + txt.loss) + d * (pos.loss + tri),
    };
    let d_anchor = (&img.d_left + &txt.d_left) * g + (&pos.d_left + &tri_a) * d;
    let d_positive = (&pos.d_right + &tri_p) * d;
    let d_negative = tri_n * d;
    let d_tau = g * (dt_img + dt_txt) + d * dt_pos;
    Ok((terms, [d_anchor, d_positive, d_negative], d_tau))
}

/// Weighted loss over a batch; image and text embeddings are constants.
pub fn total_loss(
    batch: &TriModalBatch,
    params: &EncoderParams,
    cfg: &LossConfig,
    log_tau: f64,
) -> Result<LossOutput, UtclError> {
    check_batch(batch)?;
    params.validate()?;
    let tau = log_tau.exp();
    check_tau(tau)?;
    let parts = [&batch.anchors, &batch.positives, &batch.negatives].map(|p| encode_all(p, params));
    let [a, p, n] = parts;
    let (a, p, n) = (a?, p?, n?);
    let (terms, upstreams, d_tau) = terms_and_upstreams(batch, a.matrix.view(), p.matrix.view(), n.matrix.view(), cfg, tau)?;

    let mut grads = EncoderParams::zeros();
    if cfg.gamma != 0.0 || cfg.delta != 0.0 {
        for (enc, up) in [&a, &p, &n].into_iter().zip(&upstreams) {
            for (cache, row) in enc.caches.iter().zip(up.rows()) {
                if row.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let g = lgpenc::backward(cache, params, row.as_slice().expect("row-major"))?;
                grads.add_scaled(&g.params, 1.0);
            }
        }
    }
    Ok(LossOutput { terms, grads, d_log_tau: d_tau * tau })
}

/// Forward-only loss value.
pub fn total_loss_value(
    batch: &TriModalBatch,
    params: &EncoderParams,
    cfg: &LossConfig,
    log_tau: f64,
) -> Result<f64, UtclError> {
    Ok(evaluate(batch, params, cfg, log_tau, None)?.0)
}

/// Every discrete choice behind one loss value: encoder branches per patch
/// (anchors, positives, negatives in order) and, per item, the hardest
/// positive, hardest negative and whether the hinge is active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LossBranch {
    encoder: Vec<lgpenc::Branch>,
    triplet: Vec<(usize, usize, bool)>,
}

/// Loss value and the branch it was computed on. With `branch` given, those
/// choices are imposed instead of recomputed, which makes the loss a smooth
/// function of the parameters.
pub(crate) fn evaluate(
    batch: &TriModalBatch,
    params: &EncoderParams,
    cfg: &LossConfig,
    log_tau: f64,
    branch: Option<&LossBranch>,
) -> Result<(f64, LossBranch), UtclError> {
    check_batch(batch)?;
    let tau = log_tau.exp();
    check_tau(tau)?;
    let mut encoder = Vec::with_capacity(3 * batch.len());
    let mut embed = |patches: &[lgpenc::PointPatch], offset: usize| -> Result<Array2<f64>, UtclError> {
        let mut m = Array2::zeros((patches.len(), EMBED_DIM));
        for (k, patch) in patches.iter().enumerate() {
            let row = match branch {
                Some(b) => lgpenc::forward_on_branch(patch.points(), params, &b.encoder[offset + k])?,
                None => {
                    let cache = lgpenc::forward_unchecked(patch.points(), params)?;
                    encoder.push(cache.branch());
                    cache.output
                }
            };
            m.row_mut(k).assign(&row);
        }
        Ok(m)
    };
    let b = batch.len();
    let a = embed(&batch.anchors, 0)?;
    let p = embed(&batch.positives, b)?;
    let n = embed(&batch.negatives, 2 * b)?;

    let triplet = match branch {
        Some(br) => br.triplet.clone(),
        None => {
            let dist_p = 1.0 - a.dot(&p.t());
            let dist_n = 1.0 - a.dot(&n.t());
            (0..b)
                .map(|i| {
                    let (kp, hp) = first_extreme(dist_p.row(i).iter().copied(), |x, best| x > best);
                    let (kn, hn) = first_extreme(dist_n.row(i).iter().copied(), |x, best| x < best);
                    (kp, kn, hp - hn + cfg.epsilon > 0.0)
                })
                .collect()
        }
    };
    let tri: f64 = triplet
        .iter()
        .enumerate()
        .filter(|(_, c)| c.2)
        .map(|(i, &(kp, kn, _))| a.row(i).dot(&n.row(kn)) - a.row(i).dot(&p.row(kp)) + cfg.epsilon)
        .sum::<f64>()
        / b as f64;

    let images = stack(&batch.images)?;
    let texts = stack(&batch.texts)?;
    let cc = |f: ArrayView2<f64>| cc_grad(a.view(), f, tau).0.loss;
    let total = cfg.gamma * (cc(images.view()) + cc(texts.view())) + cfg.delta * (cc(p.view()) + tri);
    let encoder = branch.map_or(encoder, |br| br.encoder.clone());
    Ok((total, LossBranch { encoder, triplet }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::random_unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn cc_single_aligned_pair_is_zero() {
        let p = [e(&[1.0, 0.0])];
        assert_eq!(cc_loss(&p, &p, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn cc_two_by_two_hand_value() {
        let p = [e(&[1.0, 0.0]), e(&[0.0, 1.0])];
        let v = cc_loss(&p, &p, 1.0).unwrap();
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12, "{v}");
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cc_rejects_bad_tau_and_shapes() {
        let p = [e(&[1.0, 0.0])];
        assert!(cc_loss(&p, &p, 0.0).is_err());
        assert!(cc_loss(&p, &[], 1.0).is_err());
    }

    #[test]
    fn cc_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<_> = (0..5).map(|_| random_unit(16, &mut rng)).collect();
        let f: Vec<_> = (0..5).map(|_| random_unit(16, &mut rng)).collect();
        let order = [3, 0, 4, 1, 2];
        let pp: Vec<_> = order.iter().map(|&i| p[i].clone()).collect();
        let ff: Vec<_> = order.iter().map(|&i| f[i].clone()).collect();
        let a = cc_loss(&p, &f, 0.2).unwrap();
        let b = cc_loss(&pp, &ff, 0.2).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(a >= 0.0 && a.is_finite());
    }

    #[test]
    fn triplet_examples() {
        let x = e(&[1.0, 0.0, 0.0]);
        let y = e(&[0.0, 1.0, 0.0]);
        let (xs, ys) = ([x], [y]);
        assert_eq!(triplet_loss(&xs, &xs, &ys, 0.2).unwrap(), 0.0);
        assert_eq!(triplet_loss(&xs, &ys, &ys, 0.0).unwrap(), 0.0);
        let [x] = xs;
        // d(a, p) = 0.5, d(a, n) = 0.3.
        let p = e(&[0.5, (0.75f64).sqrt(), 0.0]);
        let n = e(&[0.7, 0.0, (0.51f64).sqrt()]);
        let v = triplet_loss(&[x], &[p], &[n], 0.2).unwrap();
        assert!((v - 0.4).abs() < 1e-12, "{v}");
    }

    #[test]
    fn triplet_moves_with_hardest_distances() {
        let a = [e(&[1.0, 0.0, 0.0])];
        let p = [e(&[0.9, 0.3, 0.0])];
        let near_n = [e(&[0.8, 0.0, 0.6])];
        let far_n = [e(&[0.6, 0.0, 0.8])];
        let base = triplet_loss(&a, &p, &near_n, 0.5).unwrap();
        assert!(triplet_loss(&a, &p, &far_n, 0.5).unwrap() <= base);
        let worse_p = [e(&[0.7, 0.7, 0.0])];
        assert!(triplet_loss(&a, &worse_p, &near_n, 0.5).unwrap() >= base);
    }

    #[test]
    fn cc_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = stack(&(0..3).map(|_| random_unit(6, &mut rng)).collect::<Vec<_>>()).unwrap();
        let f = stack(&(0..3).map(|_| random_unit(6, &mut rng)).collect::<Vec<_>>()).unwrap();
        let tau = 0.3;
        let (g, d_tau) = cc_grad(p.view(), f.view(), tau);
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 3), (2, 5)] {
            let mut plus = p.clone();
            plus[[i, j]] += h;
            let mut minus = p.clone();
            minus[[i, j]] -= h;
            let num = (cc_grad(plus.view(), f.view(), tau).0.loss - cc_grad(minus.view(), f.view(), tau).0.loss) / (2.0 * h);
            assert!((num - g.d_left[[i, j]]).abs() < 1e-7);
            let mut plus = f.clone();
            plus[[i, j]] += h;
            let mut minus = f.clone();
            minus[[i, j]] -= h;
            let num = (cc_grad(p.view(), plus.view(), tau).0.loss - cc_grad(p.view(), minus.view(), tau).0.loss) / (2.0 * h);
            assert!((num - g.d_right[[i, j]]).abs() < 1e-7);
        }
        let num = (cc_grad(p.view(), f.view(), tau + h).0.loss - cc_grad(p.view(), f.view(), tau - h).0.loss) / (2.0 * h);
        assert!((num - d_tau).abs() < 1e-6);
    }
}
