//! Acceptance suite. Every criterion runs in order and prints one
//! `PASS`/`FAIL` line; the test fails at the end if any criterion failed.
//!
//! `cargo test -p trimot --test acceptance`

use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimot_core::assoc::{greedy_assign, hungarian_assign, AssocConfig, AssocMode, CostMatrix};
use trimot_core::dataio::{format_text_prompt, format_tracks, parse_rows, KittiTrackRow};
use trimot_core::geom::{bev_iou, fgam, Box3D};
use trimot_core::kalman::KFConfig;
use trimot_core::lgpenc::{encode, Embedding, EncoderParams, PointPatch};
use trimot_core::moteval::{evaluate, hypothesis_frames, scenario_ground_truth, EvalReport};
use trimot_core::oracles::{axis_aligned_iou, brute_force_assignment, greedy_sort_sweep, naive_encode};
use trimot_core::simkit::{fixture, generate, oracle_embeddings, Scenario, SimConfig};
use trimot_core::tracker::{run_sequence, Detection, Observation, TrackOutput, Tracker, TrackerConfig};
use trimot_core::utcl::{intra_inter_cost, retrieval_accuracy, toy_dataset, toy_eval_set, train, LossConfig, ToyConfig, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        rng.random_range(-40.0..40.0),
        rng.random_range(-40.0..40.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.3..6.0),
        rng.random_range(0.3..3.0),
        rng.random_range(0.5..3.0),
        rng.random_range(-3.1..3.1),
    )
    .unwrap()
}

fn similarity(b: &Box3D, theta: f64, t: [f64; 2], s: f64) -> Box3D {
    let (sn, c) = theta.sin_cos();
    Box3D::new(s * (c * b.x - sn * b.y) + t[0], s * (sn * b.x + c * b.y) + t[1], s * b.z, s * b.l, s * b.w, s * b.h, b.yaw + theta)
        .unwrap()
}

fn fgam_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let pairs: Vec<(Box3D, Box3D, f64, [f64; 2], f64)> = (0..1000)
        .map(|_| {
            let a = random_box(&mut rng);
            let mut b = random_box(&mut rng);
            // Half the pairs are near each other so both gate outcomes occur.
            if rng.random_bool(0.5) {
                b.x = a.x + rng.random_range(-3.0..3.0);
                b.y = a.y + rng.random_range(-3.0..3.0);
            }
            let t = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            (a, b, rng.random_range(-3.1..3.1), t, rng.random_range(0.1..10.0))
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (a, b, theta, t, s) in &pairs {
        let base = fgam(a, b).unwrap().value();
        check(base == fgam(b, a).unwrap().value(), "symmetry is not exact")?;
        for (sa, sb) in [
            (similarity(a, 0.0, *t, 1.0), similarity(b, 0.0, *t, 1.0)),
            (similarity(a, *theta, [0.0, 0.0], 1.0), similarity(b, *theta, [0.0, 0.0], 1.0)),
            (similarity(a, 0.0, [0.0, 0.0], *s), similarity(b, 0.0, [0.0, 0.0], *s)),
        ] {
            let moved = fgam(&sa, &sb).unwrap().value();
            // Coincident centers give exactly zero on both sides.
            if base != moved {
                worst = worst.max(rel(base, moved));
            }
        }
    }
    let elapsed = start.elapsed();
    check(worst < 1e-9, format!("max invariance rel. error {worst:.2e}"))?;
    check(elapsed < Duration::from_secs(1), format!("runtime {elapsed:?}"))?;
    Ok(format!("1000 pairs, max rel. error {worst:.1e}, {elapsed:?}"))
}

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let mut b = || {
            Box3D::bev(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.2..5.0), rng.random_range(0.2..5.0), 0.0)
                .unwrap()
        };
        let (a, c) = (b(), b());
        let oracle = axis_aligned_iou(&a, &c);
        overlapping += usize::from(oracle > 0.0);
        worst = worst.max((bev_iou(&a, &c).unwrap() - oracle).abs());
        worst_self = worst_self.max((bev_iou(&a, &a).unwrap() - 1.0).abs());
    }
    check(worst < 1e-9, format!("max deviation from oracle {worst:.2e}"))?;
    check(worst_self < 1e-9, format!("self-IoU deviation {worst_self:.2e}"))?;
    Ok(format!("1000 pairs ({overlapping} overlapping), max error {worst:.1e}, self {worst_self:.1e}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, max_dim: usize) -> CostMatrix {
    let rows = rng.random_range(1..=max_dim);
    let cols = rng.random_range(1..=max_dim);
    let entries: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0..40) as f64 / 10.0).collect();
    let gate: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.85)).collect();
    CostMatrix::new(rows, cols, entries, gate).unwrap()
}

fn assignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut brute = 0;
    for i in 0..500 {
        let c = random_matrix(&mut rng, 12);
        let mut greedy = greedy_assign(&c, f64::INFINITY);
        greedy.matches.sort_unstable();
        check(greedy.matches == greedy_sort_sweep(&c, f64::INFINITY), format!("matrix {i}: greedy differs from reference"))?;
        let h = hungarian_assign(&c);
        // Hungarian maximizes cardinality first, so compare costs when the
        // greedy matching is also maximum.
        if h.matches.len() == greedy.matches.len() {
            check(c.total(&h) <= c.total(&greedy) + 1e-12, format!("matrix {i}: hungarian costs more than greedy"))?;
        } else {
            check(h.matches.len() > greedy.matches.len(), format!("matrix {i}: hungarian matched fewer pairs"))?;
        }
        if c.rows() <= 7 && c.cols() <= 7 {
            brute += 1;
            let (card, cost) = brute_force_assignment(&c);
            check(h.matches.len() == card, format!("matrix {i}: hungarian cardinality {} vs {card}", h.matches.len()))?;
            check((c.total(&h) - cost).abs() < 1e-9, format!("matrix {i}: hungarian cost {} vs brute force {cost}", c.total(&h)))?;
        }
    }
    Ok(format!("500 matrices, {brute} brute-force checked"))
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_trimot"))
        .args(["gradcheck", "--trials", "50"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let max_line = stdout.lines().find(|l| l.starts_with("max rel error")).unwrap_or("").to_string();
    check(out.status.success(), format!("exit {:?}: {max_line}", out.status.code()))?;
    let value: f64 = max_line.split_whitespace().last().and_then(|v| v.parse().ok()).ok_or("no max error reported")?;
    check(value < 1e-4, format!("max rel. error {value:.2e}"))?;
    check(elapsed < Duration::from_secs(60), format!("runtime {elapsed:?}"))?;
    Ok(format!("max rel. error {value:.2e}, {elapsed:.1?}"))
}

fn encoder_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let params = EncoderParams::init(0);
    let (mut perm, mut norm, mut oracle) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..100 {
        let n = rng.random_range(1..=64);
        let rows: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let a = encode(&PointPatch::from_rows(&rows).unwrap(), &params).unwrap();
        let mut shuffled = rows.clone();
        for i in (1..n).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let b = encode(&PointPatch::from_rows(&shuffled).unwrap(), &params).unwrap();
        let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        perm = perm.max(max_diff(a.as_slice(), b.as_slice()));
        norm = norm.max((a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs());
        // The loop oracle is slow; every fifth patch is enough.
        if k % 5 == 0 {
            oracle = oracle.max(max_diff(a.as_slice(), &naive_encode(&rows, &params)));
        }
    }
    check(perm < 1e-6, format!("permutation deviation {perm:.2e}"))?;
    check(norm < 1e-6, format!("unit-norm deviation {norm:.2e}"))?;
    check(oracle < 1e-6, format!("oracle deviation {oracle:.2e}"))?;
    Ok(format!("100 patches: permutation {perm:.1e}, norm {norm:.1e}, oracle {oracle:.1e}"))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let toy = ToyConfig::default();
    check(toy.n_identities == 20, "toy dataset must have 20 identities")?;
    let store = toy_dataset(&toy).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 50, batches_per_epoch: 2, batch_size: 8, train_points: 800, ..TrainConfig::default() };
    check(cfg.learning_rate == 0.003, "learning rate must be 0.003")?;
    let init = EncoderParams::init(0);
    let out = train(&store, &init, &cfg, &LossConfig::default()).map_err(|e| e.to_string())?;
    let (patches, labels) = toy_eval_set(&store, 5, 400, 1).map_err(|e| e.to_string())?;
    let embeds: Vec<Embedding> = patches.iter().map(|p| encode(p, &out.params).unwrap()).collect();
    let acc = retrieval_accuracy(&embeds, &labels);
    let (intra, inter) = intra_inter_cost(&embeds, &labels);
    let (first, last) = (out.trace[0].loss, out.trace[out.trace.len() - 1].loss);
    let elapsed = start.elapsed();
    let summary = format!(
        "loss {first:.3} -> {last:.3}, retrieval {acc:.3}, intra {intra:.3} < inter {inter:.3}, {} epochs, {elapsed:.0?}",
        cfg.epochs
    );
    check(last < first, format!("loss did not decrease: {summary}"))?;
    check(acc >= 0.90, format!("retrieval below 0.90: {summary}"))?;
    check(intra < inter, format!("intra-identity cost not below inter: {summary}"))?;
    check(elapsed < Duration::from_secs(300), format!("runtime over 5 min: {summary}"))?;
    Ok(summary)
}

fn with_oracle(cfg: &SimConfig) -> Scenario {
    let mut s = generate(cfg).unwrap();
    let e = oracle_embeddings(&s, cfg.embedding_noise, cfg.seed);
    s.set_embeddings(e);
    s
}

fn track(s: &Scenario, mode: AssocMode) -> Vec<TrackOutput> {
    let assoc = AssocConfig { mode, ..AssocConfig::default() };
    run_sequence(&s.observations().unwrap(), TrackerConfig::default(), assoc, KFConfig::default()).unwrap()
}

fn score(s: &Scenario, rows: &[TrackOutput]) -> EvalReport {
    evaluate(&scenario_ground_truth(s), &hypothesis_frames(rows, s.frames.len()), 2.0).unwrap()
}

fn clean_end_to_end() -> Outcome {
    let s = with_oracle(&SimConfig { n_objects: 10, n_frames: 50, ..SimConfig::default() });
    let r = score(&s, &track(&s, AssocMode::UtrFgc));
    check(r.mota == 1.0 && r.idsw == 0, format!("MOTA {} IDSW {}", r.mota, r.idsw))?;
    Ok(format!("MOTA {:.4}, IDSW {}", r.mota, r.idsw))
}

fn noisy_config(seed: u64) -> SimConfig {
    SimConfig { n_objects: 20, n_frames: 100, pos_sigma: 0.3, p_miss: 0.1, clutter_rate: 2.0, seed, ..SimConfig::default() }
}

fn noisy_end_to_end() -> Outcome {
    let reports: Vec<EvalReport> = (0..10)
        .map(|seed| {
            let s = with_oracle(&noisy_config(seed));
            score(&s, &track(&s, AssocMode::UtrFgc))
        })
        .collect();
    let mota = reports.iter().map(|r| r.mota).sum::<f64>() / 10.0;
    let idsw = reports.iter().map(|r| r.idsw as f64).sum::<f64>() / 10.0;
    let worst = reports.iter().map(|r| r.mota).fold(f64::INFINITY, f64::min);
    let summary = format!("mean MOTA {mota:.4} (worst seed {worst:.4}), mean IDSW {idsw:.1}");
    check(mota >= 0.80 && idsw <= 2.0, summary.clone())?;
    Ok(summary)
}

fn ablation_direction() -> Outcome {
    let moderate = fixture("moderate").unwrap();
    let idsw = |m| score(&moderate, &track(&moderate, m)).idsw;
    let (fgc, utr, geom) = (idsw(AssocMode::UtrFgc), idsw(AssocMode::Utr), idsw(AssocMode::GeomOnly));
    check(fgc < utr && fgc < geom, format!("moderate IDSW: utr+fgc {fgc}, utr {utr}, geom-only {geom}"))?;

    let difficult = fixture("difficult").unwrap();
    let ids = |rows: &[TrackOutput]| rows.iter().map(|r| r.id).collect::<BTreeSet<_>>().len();
    let f_rows = track(&difficult, AssocMode::UtrFgc);
    let c_rows = track(&difficult, AssocMode::UtrCgc);
    let (f, c) = (score(&difficult, &f_rows), score(&difficult, &c_rows));
    let kept = ids(&f_rows) == 1 && f.mota == 1.0;
    let lost = c.fn_ > 0 || ids(&c_rows) > 1;
    check(kept && lost, format!("difficult: F-GC ids {} MOTA {}, C-GC ids {} FN {}", ids(&f_rows), f.mota, ids(&c_rows), c.fn_))?;
    Ok(format!(
        "moderate IDSW utr+fgc {fgc} < utr {utr}, geom-only {geom}; difficult F-GC 1 track, C-GC {} tracks / FN {}",
        ids(&c_rows),
        c.fn_
    ))
}

fn throughput() -> Outcome {
    // 100 tracks established over a few frames, then timed steps against
    // 100 detections that keep every track matched.
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let anchors: Vec<(f64, f64, Embedding)> = (0..100)
        .map(|k| {
            let (x, y) = ((k % 10) as f64 * 12.0, (k / 10) as f64 * 12.0);
            (x, y, trimot_core::simkit::identity_anchor(k, 0))
        })
        .collect();
    let frame = |t: usize, rng: &mut ChaCha8Rng| -> Vec<Observation> {
        anchors
            .iter()
            .map(|(x, y, e)| Observation {
                detection: Detection {
                    bbox: Box3D::new(x + 0.5 * t as f64 + rng.random_range(-0.1..0.1), *y, 0.0, 4.0, 1.8, 1.5, 0.0).unwrap(),
                    score: 0.9,
                    category: "Car".into(),
                },
                embedding: e.clone(),
            })
            .collect()
    };
    let mut tracker = Tracker::new(TrackerConfig::default(), AssocConfig::default(), KFConfig::default()).unwrap();
    for t in 0..5 {
        tracker.step(&frame(t, &mut rng)).unwrap();
    }
    let inputs: Vec<Vec<Observation>> = (5..105).map(|t| frame(t, &mut rng)).collect();
    let mut times = Vec::with_capacity(inputs.len());
    for f in &inputs {
        let start = Instant::now();
        tracker.step(f).unwrap();
        times.push(start.elapsed());
    }
    check(tracker.tracks().len() == 100, format!("{} tracks alive after timing", tracker.tracks().len()))?;
    times.sort();
    let median = times[times.len() / 2];

    let noisy = with_oracle(&noisy_config(0));
    let stream = noisy.observations().unwrap();
    let start = Instant::now();
    run_sequence(&stream, TrackerConfig::default(), AssocConfig::default(), KFConfig::default()).unwrap();
    let fps = stream.len() as f64 / start.elapsed().as_secs_f64();
    let summary = format!("100x100 step median {median:?}, noisy pipeline {fps:.0} frames/s");
    check(median < Duration::from_millis(5), summary.clone())?;
    check(fps > 100.0, summary.clone())?;
    Ok(summary)
}

fn format_fidelity() -> Outcome {
    // Write -> parse -> write is byte-identical, and every field survives.
    let rows = track(&fixture("moderate").unwrap(), AssocMode::UtrFgc);
    let text = format_tracks(&rows);
    let parsed = parse_rows(text.as_bytes()).map_err(|e| e.to_string())?;
    let rewritten: String = parsed.iter().map(|r| format!("{r}\n")).collect();
    check(rewritten == text, "KITTI write -> parse -> write changed bytes")?;
    for (line, r) in text.lines().zip(&parsed) {
        let again = KittiTrackRow::parse(line, 1).map_err(|e| e.to_string())?;
        check(&again == r, format!("row not field-identical: {line}"))?;
    }

    let golden_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/easy_tracks.txt");
    let golden = std::fs::read_to_string(golden_path).map_err(|e| format!("{golden_path}: {e}"))?;
    check(format_tracks(&track(&fixture("easy").unwrap(), AssocMode::UtrFgc)) == golden, "easy fixture output differs from golden file")?;

    let expected = "The category of the object is Car, and its location can be represented by four coordinates: \
                    (1.00, 1.00), (1.00, 0.00), (0.00, 0.00), and (0.00, 1.00).";
    let prompt = format_text_prompt("Car", &[[1.0, 1.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
    check(prompt == expected, format!("prompt mismatch: {prompt}"))?;
    Ok(format!("{} KITTI rows round-tripped, golden file equal, prompt equal", parsed.len()))
}

/// Writes past the test harness's output capture so the verdicts show up in
/// a plain `cargo test` run.
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("fgam-invariance", fgam_invariance),
        ("bev-iou-oracle", iou_oracle),
        ("assignment", assignment),
        ("gradcheck", gradcheck),
        ("encoder-invariants", encoder_invariants),
        ("toy-training", toy_training),
        ("clean-end-to-end", clean_end_to_end),
        ("noisy-end-to-end", noisy_end_to_end),
        ("ablation-direction", ablation_direction),
        ("throughput", throughput),
        ("format-fidelity", format_fidelity),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => report(&format!("PASS {:>2} {name}: {detail}", i + 1)),
            Err(detail) => {
                report(&format!("FAIL {:>2} {name}: {detail}", i + 1));
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
