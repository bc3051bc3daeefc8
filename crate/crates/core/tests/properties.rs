use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trimot_core::dataio::{format_tracks, parse_rows, RunConfig};
use trimot_core::geom::{bev_iou, fgam, Box3D};
use trimot_core::lgpenc::{encode, Embedding, EncoderParams, PointPatch};
use trimot_core::moteval::{evaluate, Labeled};
use trimot_core::simkit::random_unit;
use trimot_core::tracker::TrackOutput;
use trimot_core::utcl::{cc_loss, total_loss, triplet_loss, LossConfig, TriModalBatch};

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.3..6.0f64, 0.3..3.0f64, -3.1..3.1f64)
        .prop_map(|(x, y, l, w, yaw)| Box3D::bev(x, y, l, w, yaw).unwrap())
}

fn rigid(b: &Box3D, theta: f64, tx: f64, ty: f64, s: f64) -> Box3D {
    let (sn, c) = theta.sin_cos();
    Box3D::new(s * (c * b.x - sn * b.y) + tx, s * (sn * b.x + c * b.y) + ty, b.z, s * b.l, s * b.w, s * b.h, b.yaw + theta)
        .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn unit(dim: usize, seed: u64) -> Embedding {
    random_unit(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fgam_invariances(a in arb_box(), b in arb_box(), theta in -3.0..3.0f64, tx in -100.0..100.0f64,
                        ty in -100.0..100.0f64, s in 0.1..10.0f64) {
        let base = fgam(&a, &b).unwrap().value();
        prop_assert_eq!(base, fgam(&b, &a).unwrap().value());
        let moved = fgam(&rigid(&a, theta, tx, ty, 1.0), &rigid(&b, theta, tx, ty, 1.0)).unwrap().value();
        prop_assert!(rel(base, moved) < 1e-9 || (base - moved).abs() < 1e-12);
        let scaled = fgam(&rigid(&a, 0.0, 0.0, 0.0, s), &rigid(&b, 0.0, 0.0, 0.0, s)).unwrap().value();
        prop_assert!(rel(base, scaled) < 1e-9 || (base - scaled).abs() < 1e-12);
    }

    #[test]
    fn iou_is_rigid_invariant(a in arb_box(), dx in -2.0..2.0f64, dy in -2.0..2.0f64, theta in -3.0..3.0f64) {
        let b = Box3D::bev(a.x + dx, a.y + dy, a.l * 0.8, a.w * 1.2, a.yaw + 0.3).unwrap();
        let base = bev_iou(&a, &b).unwrap();
        let moved = bev_iou(&rigid(&a, theta, 5.0, -7.0, 1.0), &rigid(&b, theta, 5.0, -7.0, 1.0)).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn cc_loss_nonnegative_and_equivariant(b in 1usize..6, seed in any::<u64>(), tau in 0.01..2.0f64, shift in 0usize..5) {
        let p: Vec<Embedding> = (0..b).map(|k| unit(12, seed ^ k as u64)).collect();
        let f: Vec<Embedding> = (0..b).map(|k| unit(12, seed.wrapping_add(1000 + k as u64))).collect();
        let v = cc_loss(&p, &f, tau).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
        let rot = |x: &[Embedding]| { let mut y = x.to_vec(); y.rotate_left(shift % b); y };
        prop_assert!((cc_loss(&rot(&p), &rot(&f), tau).unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn triplet_monotone_in_distances(eps in 0.0..0.5f64, t in 0.05..0.95f64) {
        // One item: anchor e0; positive and negative move along great
        // circles away from it as their angle grows.
        let e = |angle: f64, axis: usize| {
            let mut v = vec![0.0; 4];
            v[0] = angle.cos();
            v[axis] = angle.sin();
            Embedding::new(v).unwrap()
        };
        let a = [e(0.0, 1)];
        let p = e(t, 1);
        let n = e(t + 0.3, 2);
        let base = triplet_loss(&a, std::slice::from_ref(&p), &[n], eps).unwrap();
        prop_assert!(base >= 0.0);
        let farther_neg = triplet_loss(&a, &[p], &[e(t + 0.6, 2)], eps).unwrap();
        prop_assert!(farther_neg <= base + 1e-15);
        let farther_pos = triplet_loss(&a, &[e(t + 0.2, 1)], &[e(t + 0.3, 2)], eps).unwrap();
        prop_assert!(farther_pos >= base - 1e-15);
    }

    #[test]
    fn kitti_rows_round_trip(rows in prop::collection::vec((0usize..50, 1u64..100, arb_box(), 0.0..1.0f64), 0..20)) {
        let tracks: Vec<TrackOutput> = rows
            .iter()
            .map(|(f, id, b, s)| TrackOutput { frame: *f, id: *id, bbox: *b, score: *s, category: "Car".into() })
            .collect();
        let text = format_tracks(&tracks);
        let parsed = parse_rows(text.as_bytes()).unwrap();
        prop_assert_eq!(parsed.len(), tracks.len());
        let mut sorted = tracks.clone();
        sorted.sort_by_key(|t| (t.frame, t.id));
        for (r, t) in parsed.iter().zip(&sorted) {
            let b = r.to_box().unwrap();
            prop_assert_eq!((r.frame, r.track_id), (t.frame, t.id as i64));
            for (u, v) in [(b.x, t.bbox.x), (b.y, t.bbox.y), (b.z, t.bbox.z), (b.l, t.bbox.l), (b.w, t.bbox.w)] {
                prop_assert!((u - v).abs() <= 1e-6);
            }
            let dyaw = (b.yaw - t.bbox.yaw).rem_euclid(2.0 * std::f64::consts::PI);
            prop_assert!(dyaw.min(2.0 * std::f64::consts::PI - dyaw) <= 2e-6);
        }
    }

    #[test]
    fn relabeling_hypotheses_keeps_report(n in 1usize..20, offset in 1u64..1000) {
        let gt: Vec<Vec<Labeled>> = (0..n)
            .map(|t| (0..3).map(|k| Labeled { id: k, bbox: Box3D::bev(t as f64, 10.0 * k as f64, 4.0, 2.0, 0.0).unwrap() }).collect())
            .collect();
        let hyp: Vec<Vec<Labeled>> = gt
            .iter()
            .map(|f| f.iter().map(|l| Labeled { id: l.id + offset, bbox: l.bbox }).collect())
            .collect();
        let r = evaluate(&gt, &hyp, 2.0).unwrap();
        prop_assert_eq!(r.mota, 1.0);
        prop_assert_eq!(r.idsw, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encoder_permutation_invariant_and_unit(seed in any::<u64>(), n in 1usize..40, rot in 0usize..40) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let params = EncoderParams::init(seed % 4);
        let a = encode(&PointPatch::from_rows(&rows).unwrap(), &params).unwrap();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % n);
        shuffled.reverse();
        let b = encode(&PointPatch::from_rows(&shuffled).unwrap(), &params).unwrap();
        let norm = a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

fn toy_batch(b: usize) -> TriModalBatch {
    let patch = |k: usize| {
        let rows: Vec<[f64; 3]> = (0..8).map(|i| [(i * k) as f64 * 0.1, i as f64 * 0.2 - 0.5, (k as f64).cos()]).collect();
        PointPatch::from_rows(&rows).unwrap()
    };
    TriModalBatch {
        anchors: (0..b).map(patch).collect(),
        images: (0..b).map(|k| unit(512, k as u64)).collect(),
        texts: (0..b).map(|k| unit(512, 100 + k as u64)).collect(),
        positives: (0..b).map(|k| patch(k + 10)).collect(),
        negatives: (0..b).map(|k| patch(k + 20)).collect(),
    }
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let cfg = LossConfig { gamma: 0.0, delta: 0.0, ..LossConfig::default() };
    let out = total_loss(&toy_batch(3), &EncoderParams::init(0), &cfg, 0.07f64.ln()).unwrap();
    assert_eq!(out.terms.total, 0.0);
    assert_eq!(out.grads.max_abs(), 0.0);
    assert_eq!(out.d_log_tau, 0.0);
}

#[test]
fn single_item_alignment_terms_vanish() {
    let params = EncoderParams::init(0);
    let mut batch = toy_batch(1);
    let p = encode(&batch.anchors[0], &params).unwrap();
    batch.images = vec![p.clone()];
    batch.texts = vec![p];
    let cfg = LossConfig { gamma: 1.0, delta: 0.0, ..LossConfig::default() };
    let out = total_loss(&batch, &params, &cfg, 0.07f64.ln()).unwrap();
    assert!(out.terms.total.abs() < 1e-12);
}

#[test]
fn mismatched_batch_is_rejected() {
    let mut batch = toy_batch(2);
    batch.texts.pop();
    assert!(total_loss(&batch, &EncoderParams::init(0), &LossConfig::default(), 0.0).is_err());
    let mut batch = toy_batch(2);
    batch.images[0] = unit(16, 1);
    assert!(total_loss(&batch, &EncoderParams::init(0), &LossConfig::default(), 0.0).is_err());
}

#[test]
fn config_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let cfg = RunConfig::default().with_overrides(&["simkit.n_objects=7", "utcl.train.epochs=3"]).unwrap();
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
