use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use trimot_core::assoc::{AssocConfig, AssocMode};
use trimot_core::dataio::{self, DataError, RunConfig};
use trimot_core::lgpenc::checkpoint::{self, CheckpointError};
use trimot_core::lgpenc::{self, Embedding, EncoderError, EncoderParams};
use trimot_core::moteval::{self, EvalError, EvalReport, Labeled};
use trimot_core::simkit::{self, cuboid_patch, mix, Scenario, SimError};
use trimot_core::tracker::{run_sequence, Detection, Observation, TrackOutput, TrackerError};
use trimot_core::utcl::{self, gradcheck, TrackletStore, UtclError};

use crate::args::{
    AblateArgs, ConfigArgs, EmbeddingSource, EvalArgs, GradcheckArgs, SimEmbeddings, SimulateArgs, TrackArgs, TrainArgs,
};

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid flags or configuration (exit code 2).
    #[error("{0}")]
    Usage(String),
    /// The command ran and failed (exit code 1).
    #[error("{0}")]
    Failed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Train(#[from] UtclError),
    #[error(transparent)]
    Track(#[from] TrackerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    base.with_overrides(&args.overrides).map_err(|e| CliError::Usage(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path)(e.into()))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_scenario(path: &Path) -> Result<Scenario> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(Scenario::read_jsonl(BufReader::new(f))?)
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.simkit.seed = seed;
    }
    let mut scenario = match &args.fixture {
        Some(name) => simkit::fixture(name).map_err(|e| CliError::Usage(e.to_string()))?,
        None => {
            let mut s = simkit::generate(&cfg.simkit).map_err(|e| match e {
                SimError::InvalidConfig(m) => CliError::Usage(format!("invalid simulator config: {m}")),
                other => other.into(),
            })?;
            if args.embeddings == SimEmbeddings::Oracle {
                let e = simkit::oracle_embeddings(&s, cfg.simkit.embedding_noise, cfg.simkit.seed);
                s.set_embeddings(e);
            }
            s
        }
    };
    if args.embeddings == SimEmbeddings::None {
        scenario.frames.iter_mut().flat_map(|f| f.detections.iter_mut()).for_each(|d| d.embedding = None);
    }
    let mut w = create(&args.out)?;
    scenario.write_jsonl(&mut w)?;
    w.flush().map_err(io_err(&args.out))?;
    let n_dets: usize = scenario.frames.iter().map(|f| f.detections.len()).sum();
    println!("wrote {} frames, {} detections to {}", scenario.frames.len(), n_dets, args.out.display());
    Ok(())
}

fn load_params(checkpoint_path: Option<&Path>, cfg: &RunConfig) -> Result<EncoderParams> {
    Ok(match checkpoint_path {
        Some(p) => checkpoint::load(p)?.params,
        None => EncoderParams::init(cfg.lgpenc.init_seed),
    })
}

/// Encoder embeddings for every detection, from patches synthesized from the
/// detection boxes with per-detection seeds.
fn encoder_embeddings(frames: &[Vec<Detection>], params: &EncoderParams, cfg: &RunConfig) -> Result<Vec<Vec<Embedding>>> {
    params.validate()?;
    frames
        .iter()
        .enumerate()
        .map(|(t, dets)| {
            dets.iter()
                .enumerate()
                .map(|(k, d)| {
                    let seed = mix(mix(cfg.lgpenc.init_seed, t as u64), k as u64);
                    Ok(lgpenc::encode(&cuboid_patch(&d.bbox, cfg.lgpenc.test_points, seed), params)?)
                })
                .collect()
        })
        .collect()
}

fn attach(frames: Vec<Vec<Detection>>, embeddings: Vec<Vec<Embedding>>) -> Vec<Vec<Observation>> {
    frames
        .into_iter()
        .zip(embeddings)
        .map(|(ds, es)| ds.into_iter().zip(es).map(|(detection, embedding)| Observation { detection, embedding }).collect())
        .collect()
}

fn scenario_observations(
    s: &Scenario,
    source: EmbeddingSource,
    checkpoint_path: Option<&Path>,
    cfg: &RunConfig,
) -> Result<Vec<Vec<Observation>>> {
    let dets = || s.frames.iter().map(|f| f.detections.iter().map(|d| d.detection.clone()).collect()).collect::<Vec<_>>();
    match source {
        EmbeddingSource::Fixture => s.observations().map_err(|e| {
            CliError::Usage(format!("{e}; pass --embeddings oracle or --embeddings encoder for this scenario"))
        }),
        EmbeddingSource::Oracle => {
            let noise = s.meta.config.as_ref().map_or(cfg.simkit.embedding_noise, |c| c.embedding_noise);
            Ok(attach(dets(), simkit::oracle_embeddings(s, noise, s.meta.seed)))
        }
        EmbeddingSource::Encoder => {
            let params = load_params(checkpoint_path, cfg)?;
            let d = dets();
            let e = encoder_embeddings(&d, &params, cfg)?;
            Ok(attach(d, e))
        }
    }
}

pub fn track(args: &TrackArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let stream = match (&args.dets, &args.scenario) {
        (Some(path), None) => {
            let source = args.embeddings.unwrap_or(EmbeddingSource::Encoder);
            if source != EmbeddingSource::Encoder {
                return Err(CliError::Usage("detection files carry no identities; use --embeddings encoder".into()));
            }
            let frames = dataio::read_detections(path)?;
            let params = load_params(args.checkpoint.as_deref(), &cfg)?;
            let e = encoder_embeddings(&frames, &params, &cfg)?;
            attach(frames, e)
        }
        (None, Some(path)) => {
            let s = read_scenario(path)?;
            scenario_observations(&s, args.embeddings.unwrap_or(EmbeddingSource::Fixture), args.checkpoint.as_deref(), &cfg)?
        }
        _ => return Err(CliError::Usage("pass exactly one of --dets and --scenario".into())),
    };
    let rows = run_sequence(&stream, cfg.tracker, cfg.assoc, cfg.kalman)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    dataio::write_tracks(&rows, &args.out)?;
    let ids: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.id).collect();
    println!("{} frames, {} track states, {} tracks -> {}", stream.len(), rows.len(), ids.len(), args.out.display());
    Ok(())
}

fn ground_truth(path: &Path) -> Result<Vec<Vec<Labeled>>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(moteval::scenario_ground_truth(&read_scenario(path)?))
    } else {
        let rows = dataio::read_tracks(path)?;
        Ok(moteval::hypothesis_frames(&rows, 0))
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let threshold = args.threshold.unwrap_or(cfg.moteval.threshold);
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(CliError::Usage(format!("--threshold must be positive, got {threshold}")));
    }
    let gt = ground_truth(&args.gt)?;
    let hyp_rows: Vec<TrackOutput> = dataio::read_tracks(&args.hyp)?;
    let hyp = moteval::hypothesis_frames(&hyp_rows, gt.len());
    let report = moteval::evaluate(&gt, &hyp, threshold)?;
    println!("{}", report.to_table());
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let store = match &args.dataset {
        Some(path) => {
            let f = fs::File::open(path).map_err(io_err(path))?;
            TrackletStore::read_jsonl(BufReader::new(f))?
        }
        None => utcl::toy_dataset(&cfg.utcl.toy)?,
    };
    let mut train_cfg = cfg.utcl.train;
    train_cfg.train_points = cfg.lgpenc.train_points;
    train_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.utcl.loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let init = EncoderParams::init(cfg.lgpenc.init_seed);
    println!("training on {} observations, {} epochs", store.len(), train_cfg.epochs);
    let out = utcl::train_with(&store, &init, &train_cfg, &cfg.utcl.loss, |s| {
        println!("epoch {:>4}  loss {:.5}  tau {:.5}", s.epoch, s.loss, s.tau);
    })?;

    if let Some(dir) = args.out_checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    checkpoint::save(&args.out_checkpoint, &out.params, Some(out.tau))?;
    let trace_path = args.trace.clone().unwrap_or_else(|| args.out_checkpoint.with_extension("csv"));
    let mut w = create(&trace_path)?;
    writeln!(w, "epoch,loss,image,text,positive,triplet,tau").map_err(io_err(&trace_path))?;
    for s in &out.trace {
        writeln!(w, "{},{},{},{},{},{},{}", s.epoch, s.loss, s.image, s.text, s.positive, s.triplet, s.tau)
            .map_err(io_err(&trace_path))?;
    }
    w.flush().map_err(io_err(&trace_path))?;
    println!("checkpoint -> {}, loss trace -> {}", args.out_checkpoint.display(), trace_path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let report = gradcheck::gradcheck(args.trials, args.seed)?;
    println!("trials          {}", report.trials);
    println!("probes          {}", report.probes);
    println!("kink probes     {}", report.kink_probes);
    println!("max rel error   {:.3e}", report.max_rel_error);
    if let Some(w) = &report.worst {
        println!("worst           trial {} tensor {}", w.trial, w.tensor);
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if report.passed {
        println!("PASS (tolerance {:.0e})", gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error,
            gradcheck::TOLERANCE
        )))
    }
}

#[derive(Debug, Serialize)]
struct AblationRow {
    mode: String,
    #[serde(flatten)]
    report: EvalReport,
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let modes: Vec<AssocMode> = args
        .modes
        .iter()
        .map(|m| m.trim().parse().map_err(|e: trimot_core::assoc::AssocError| CliError::Usage(e.to_string())))
        .collect::<Result<_>>()?;
    let scenario = match (&args.scenario, &args.fixture) {
        (Some(p), None) => read_scenario(p)?,
        (None, Some(name)) => simkit::fixture(name).map_err(|e| CliError::Usage(e.to_string()))?,
        _ => return Err(CliError::Usage("pass exactly one of --scenario and --fixture".into())),
    };
    let stream = scenario_observations(&scenario, args.embeddings, args.checkpoint.as_deref(), &cfg)?;
    let gt = moteval::scenario_ground_truth(&scenario);

    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let assoc = AssocConfig { mode, ..cfg.assoc };
        let out = run_sequence(&stream, cfg.tracker, assoc, cfg.kalman)?;
        let report = moteval::evaluate(&gt, &moteval::hypothesis_frames(&out, gt.len()), cfg.moteval.threshold)?;
        rows.push(AblationRow { mode: mode.name().to_string(), report });
    }

    println!("{:<10} {:>9} {:>6} {:>6} {:>6}", "mode", "MOTA", "FP", "FN", "IDSW");
    for r in &rows {
        println!("{:<10} {:>9.4} {:>6} {:>6} {:>6}", r.mode, r.report.mota, r.report.fp, r.report.fn_, r.report.idsw);
    }
    if let Some(out) = &args.out {
        write_json(out, &rows)?;
    }
    Ok(())
}
