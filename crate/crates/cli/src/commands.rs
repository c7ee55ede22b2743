use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::json;

use turnkit::data::{load_samples, read_features, synth_corpus, write_corpus, DataError, Sample};
use turnkit::duplex::{AsrBackend, MonotonicClock, Session, SessionConfig};
use turnkit::evalkit::{emit_report, evaluate, render_table, summarize};
use turnkit::nnkit::{checkpoint_bytes, load_checkpoint, ParameterSet};
use turnkit::pipeline::Trainer;
use turnkit::{Mode, Model, StageId};

use crate::config::EngineConfig;
use crate::exit::Failure;
use crate::outputs::{latest, next_version, versioned, write_atomic};

/// `TURNKIT_LOG=quiet` silences progress messages on standard error.
fn info(msg: impl AsRef<str>) {
    if !matches!(std::env::var("TURNKIT_LOG").as_deref(), Ok("quiet" | "off" | "0")) {
        eprintln!("{}", msg.as_ref());
    }
}

fn data_failure(e: DataError) -> Failure {
    match e {
        DataError::Config(_) => Failure::config(e.to_string()),
        _ => Failure::io(e.to_string()),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    let samples = load_samples(path).map_err(data_failure)?;
    if samples.is_empty() {
        return Err(Failure::config(format!("{}: manifest has no samples", path.display())).into());
    }
    Ok(samples)
}

fn model(cfg: &EngineConfig) -> Result<Model> {
    Model::new(cfg.model.clone()).map_err(|e| Failure::config(e.to_string()).into())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving manifest.jsonl and features/.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `synth.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides every per-state sample count.
    #[arg(long)]
    pub per_state: Option<usize>,
}

pub fn synth(cfg: &EngineConfig, args: &SynthArgs) -> Result<()> {
    let mut sc = cfg.synth.clone();
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(n) = args.per_state {
        sc = sc.with_counts(n);
    }
    let manifest = args.out.join("manifest.jsonl");
    if manifest.exists() {
        return Err(Failure::io(format!("{} already exists; refusing to overwrite", manifest.display())).into());
    }
    let samples = synth_corpus(&sc).map_err(data_failure)?;
    let path = write_corpus(&args.out, &samples).map_err(data_failure)?;
    info(format!("wrote {} samples to {}", samples.len(), path.display()));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
    All,
}

impl StageArg {
    fn number(self) -> Option<u8> {
        match self {
            StageArg::One => Some(1),
            StageArg::Two => Some(2),
            StageArg::Three => Some(3),
            StageArg::Four => Some(4),
            StageArg::All => None,
        }
    }
}

/// Training steps making up each numbered stage.
fn sub_stages(n: u8) -> &'static [StageId] {
    match n {
        1 => &[StageId::S1a, StageId::S1b],
        2 => &[StageId::S2],
        3 => &[StageId::S3],
        _ => &[StageId::S4],
    }
}

fn stage_stem(n: u8) -> String {
    format!("stage{n}")
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Start stage 1 (or `all`) from freshly initialised parameters.
    #[arg(long)]
    pub from_scratch: bool,
    /// Training manifest; defaults to `paths.corpus`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

/// Newest checkpoint written by stage `n`.
pub fn stage_checkpoint(cfg: &EngineConfig, n: u8) -> Option<PathBuf> {
    latest(&cfg.paths.checkpoints, &stage_stem(n), "ckpt")
}

/// Loads `path` and checks it holds exactly the parameters `model` expects.
fn load_params(model: &Model, path: &Path) -> Result<ParameterSet> {
    let params = load_checkpoint(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let expected = model.init_params(0).map_err(|e| Failure::config(e.to_string()))?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(Failure::config(format!(
                    "{} does not match the model config (parameter `{name}`)",
                    path.display()
                ))
                .into())
            }
        }
    }
    if params.len() != expected.len() {
        return Err(Failure::config(format!("{} has extra parameters", path.display())).into());
    }
    Ok(params)
}

pub fn train(cfg: &EngineConfig, args: &TrainArgs) -> Result<()> {
    let stages: Vec<u8> = match args.stage.number() {
        Some(n) => vec![n],
        None => vec![1, 2, 3, 4],
    };
    let first = stages[0];
    if args.from_scratch && first != 1 {
        return Err(Failure::config("--from-scratch only applies to stage 1 or all").into());
    }
    let model = model(cfg)?;
    let params = if first == 1 {
        model.init_params(cfg.train.seed).map_err(|e| Failure::config(e.to_string()))?
    } else {
        let prev = first - 1;
        let path = stage_checkpoint(cfg, prev).ok_or_else(|| {
            Failure::missing(format!(
                "stage {first} needs a stage {prev} checkpoint in {}",
                cfg.paths.checkpoints.display()
            ))
        })?;
        info(format!("resuming from {}", path.display()));
        load_params(&model, &path)?
    };
    let manifest = args.manifest.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let corpus = load_corpus(&manifest)?;

    let dir = &cfg.paths.checkpoints;
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    let log_stem = format!("train-{}", stages.iter().map(u8::to_string).collect::<Vec<_>>().join(""));
    let log_path = versioned(dir, &log_stem, "jsonl", next_version(dir, &log_stem, &["jsonl"]));
    let log = std::fs::File::create(&log_path).map_err(|e| Failure::io(format!("{}: {e}", log_path.display())))?;
    let mut trainer = Trainer::new(&model, cfg.train.clone(), params)
        .map_err(|e| Failure::config(e.to_string()))?
        .with_log_sink(std::io::BufWriter::new(log));

    for n in stages {
        let started = Instant::now();
        for &stage in sub_stages(n) {
            let report = trainer
                .run_stage(stage, &corpus)
                .with_context(|| format!("training stage {stage}"))?;
            let tail = report.losses.len().min(50);
            let mean = report.losses[report.losses.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
            info(format!(
                "stage {stage}: {} steps, final loss {mean:.4}, {} skipped",
                report.losses.len(),
                report.skipped
            ));
        }
        let stem = stage_stem(n);
        let path = versioned(dir, &stem, "ckpt", next_version(dir, &stem, &["ckpt"]));
        write_atomic(&path, &checkpoint_bytes(&trainer.params))
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        info(format!(
            "stage {n} done in {:.1}s -> {}",
            started.elapsed().as_secs_f64(),
            path.display()
        ));
    }
    info(format!("training log: {}", log_path.display()));
    Ok(())
}

// ---------------------------------------------------------------------------

/// Model plus parameters from `checkpoint` or the newest stage-4 checkpoint.
fn engine(cfg: &EngineConfig, checkpoint: Option<&Path>) -> Result<(Model, ParameterSet)> {
    let model = model(cfg)?;
    let path = match checkpoint {
        Some(p) if p.exists() => p.to_path_buf(),
        Some(p) => return Err(Failure::missing(format!("checkpoint {} not found", p.display())).into()),
        None => stage_checkpoint(cfg, 4).ok_or_else(|| {
            Failure::missing(format!(
                "no stage 4 checkpoint in {}; run `train` first",
                cfg.paths.checkpoints.display()
            ))
        })?,
    };
    let params = load_params(&model, &path)?;
    Ok((model, params))
}

fn session_config(cfg: &EngineConfig, mode: Option<Mode>) -> Result<SessionConfig> {
    let mut sc = cfg.duplex.clone();
    if let Some(m) = mode {
        sc.mode = m;
        if m != Mode::Cascaded {
            sc.asr = AsrBackend::Ctc;
        }
    }
    sc.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(sc)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to `duplex.mode`.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Defaults to the newest stage-4 checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn eval(cfg: &EngineConfig, args: &EvalArgs) -> Result<()> {
    let sc = session_config(cfg, args.mode)?;
    let samples = load_corpus(&args.manifest)?;
    let (model, params) = engine(cfg, args.checkpoint.as_deref())?;
    let clock = MonotonicClock::new();
    let outcomes = evaluate(&model, &params, &sc, &clock, &samples)?;
    let test_set = args.manifest.display().to_string();
    let report = summarize(sc.mode.as_str(), &test_set, &outcomes)?;
    let dir = &cfg.paths.reports;
    let stem = format!("eval-{}", sc.mode);
    let stem = match next_version(dir, &stem, &["json", "txt"]) {
        1 => stem,
        n => format!("{stem}.{n}"),
    };
    emit_report(std::slice::from_ref(&report), &[], dir, &stem)
        .map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    info(format!("report: {}", dir.join(format!("{stem}.json")).display()));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Feature file to replay.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Wall-clock seconds per second of audio; 0 replays as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    pub realtime_factor: f64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn stream(cfg: &EngineConfig, args: &StreamArgs) -> Result<()> {
    if !(args.realtime_factor >= 0.0 && args.realtime_factor.is_finite()) {
        return Err(Failure::config("--realtime-factor must be a non-negative number").into());
    }
    let sc = session_config(cfg, args.mode)?;
    let features = read_features(&args.features).map_err(data_failure)?;
    let (model, params) = engine(cfg, args.checkpoint.as_deref())?;
    if features.dim() != model.cfg.encoder.input_dim {
        return Err(Failure::io(format!(
            "{}: {} features per frame, model expects {}",
            args.features.display(),
            features.dim(),
            model.cfg.encoder.input_dim
        ))
        .into());
    }
    let x = features.to_tensor();
    let period = f64::from(features.frame_period_ms());
    let clock = MonotonicClock::new();
    let mut session = Session::new(&model, &params, sc, &clock)?;
    let cf = model.cfg.encoder.chunk_frames;
    let started = Instant::now();
    let mut out = std::io::stdout().lock();
    let mut emit = |events: &[turnkit::duplex::Event]| -> Result<()> {
        use std::io::Write;
        for e in events {
            writeln!(out, "{}", e.to_json_line())?;
        }
        out.flush()?;
        Ok(())
    };
    let mut start = 0;
    while start < x.rows() {
        let len = cf.min(x.rows() - start);
        let arrival = (start + len) as f64 * period;
        let due = Duration::from_secs_f64(arrival * args.realtime_factor / 1e3);
        if let Some(wait) = due.checked_sub(started.elapsed()) {
            std::thread::sleep(wait);
        }
        let events = session.feed_frames(&x.slice_rows(start, len), arrival)?;
        emit(&events)?;
        start += len;
    }
    let before = session.events.len();
    session.finalize_segment(x.rows() as f64 * period)?;
    emit(&session.events[before..])?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Longest transcript the autoregressive cascaded baseline decodes.
    #[arg(long, default_value_t = 12)]
    pub ar_max_len: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencySummary {
    pub system: String,
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub accuracy: f64,
    pub early_rate: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn summarize_latency(system: &str, latencies: &[f64], hits: usize, early: usize) -> LatencySummary {
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    LatencySummary {
        system: system.to_string(),
        n,
        mean_ms: sorted.iter().sum::<f64>() / n as f64,
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        accuracy: hits as f64 / n as f64,
        early_rate: early as f64 / n as f64,
    }
}

pub fn bench_latency(cfg: &EngineConfig, args: &BenchArgs) -> Result<()> {
    if args.ar_max_len == 0 {
        return Err(Failure::config("--ar-max-len must be positive").into());
    }
    let mut samples = load_corpus(&args.manifest)?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let (model, params) = engine(cfg, args.checkpoint.as_deref())?;
    let base = SessionConfig {
        asr: AsrBackend::Ctc,
        ..cfg.duplex.clone()
    };
    let systems = [
        ("unified", SessionConfig { mode: Mode::Unified, ..base.clone() }),
        ("semantic", SessionConfig { mode: Mode::Semantic, ..base.clone() }),
        ("cascaded", SessionConfig { mode: Mode::Cascaded, ..base.clone() }),
        (
            "cascaded-ar",
            SessionConfig {
                mode: Mode::Cascaded,
                asr: AsrBackend::Autoregressive { max_len: args.ar_max_len },
                ..base
            },
        ),
    ];
    let mut summaries = Vec::new();
    for (name, sc) in systems {
        let clock = MonotonicClock::new();
        let outcomes = evaluate(&model, &params, &sc, &clock, &samples)?;
        let lat: Vec<f64> = outcomes.iter().map(|o| o.latency_ms).collect();
        let hits = outcomes.iter().filter(|o| o.prediction == o.label).count();
        let early = outcomes.iter().filter(|o| o.early).count();
        let s = summarize_latency(name, &lat, hits, early);
        info(format!(
            "{name:<12} mean {:8.3} ms  p50 {:8.3}  p95 {:8.3}  acc {:.3}  early {:.3}",
            s.mean_ms, s.p50_ms, s.p95_ms, s.accuracy, s.early_rate
        ));
        summaries.push(s);
    }
    let doc = json!({ "manifest": args.manifest.display().to_string(), "systems": summaries });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    let dir = &cfg.paths.reports;
    let path = versioned(dir, "latency", "json", next_version(dir, "latency", &["json"]));
    write_atomic(&path, text.as_bytes()).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    print!("{text}");
    Ok(())
}
