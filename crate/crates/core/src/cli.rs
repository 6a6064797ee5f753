//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Method};
use crate::embedding::{self, ScaleSet};
use crate::media_io::{self, AnchorMap, ANCHORS_FILE, LANDMARKS_FILE};
use crate::nn::{checkpoint, gradcheck};
use crate::synth::{self, BenchmarkConfig, SceneConfig};
use crate::train_eval::{self, TrainConfig, Variant};

/// Exit status for usage and validation failures.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures after validation.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rppg", version, about = "Remote heart-rate estimation from face video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic recording (or a benchmark of them with --count)
    Synth(SynthArgs),
    /// Build the foreground/background feature maps of a video
    Embed(EmbedArgs),
    /// Estimate heart rate with a classical colour method
    Baseline(BaselineArgs),
    /// Train a model on every video under --data
    Train(TrainArgs),
    /// Evaluate a checkpoint on every video under --data
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Run the quick end-to-end checks on tiny generated inputs
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration with optional "scene", "benchmark" and "train" sections [default: built-in defaults]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; overrides every seed in the configuration [default: config value, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory
    #[arg(long, default_value = "synth_out")]
    pub out: PathBuf,
    /// Number of videos; above 1 writes a benchmark of sub-directories v000, v001, ...
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct VideoArgs {
    /// Video directory (frames plus manifest.json)
    #[arg(long, value_name = "DIR")]
    pub video: PathBuf,
    /// Landmark CSV [default: <video>/landmarks.csv]
    #[arg(long, value_name = "FILE")]
    pub landmarks: Option<PathBuf>,
    /// Anchor map JSON [default: <video>/anchors.json]
    #[arg(long, value_name = "FILE")]
    pub anchors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub video: VideoArgs,
    /// Comma-separated window counts (perfect squares)
    #[arg(long, default_value = "25,81,169")]
    pub scales: String,
    /// Output .mmop file; a .mmop.json sidecar is written next to it [default: <video>.mmop]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub video: VideoArgs,
    /// Extraction method
    #[arg(long, value_parser = ["green", "chrom", "pos"], default_value = "pos")]
    pub method: String,
    /// JSON result file [default: none, print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelRunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of video sub-directories
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Architecture and embedding variant
    #[arg(long, value_parser = ["full", "fs_only", "fs_bs_stmap", "fs_stmap"], default_value = "full")]
    pub variant: String,
    /// Comma-separated window counts [default: config value, else 25,81,169]
    #[arg(long)]
    pub scales: Option<String>,
    /// Worker threads for embedding and evaluation [default: config value, else 1]
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: ModelRunArgs,
    /// Checkpoint path
    #[arg(long, default_value = "model.tppg")]
    pub out: PathBuf,
    /// Training epochs [default: config value, else 80]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: config value, else 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: ModelRunArgs,
    /// Checkpoint to evaluate
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Report path
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the random test inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file receiving every check [default: none, print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Seed for generated inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scratch directory [default: a temporary directory]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a run can be configured with, read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub benchmark: Option<BenchmarkConfig>,
    pub train: TrainConfig,
}

/// A failure tagged with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Failure { code: EXIT_USAGE, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            error,
        }
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(common: &CommonArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::usage)?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(Failure::usage)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.scene.seed = seed;
        cfg.train.seed = seed;
        if let Some(b) = cfg.benchmark.as_mut() {
            b.scene.seed = seed;
        }
    }
    Ok(cfg)
}

fn validated<T>(r: crate::Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure::usage(e.into()))
}

fn resolve(flag: &Option<PathBuf>, video: &Path, file: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| video.join(file))
}

fn synth_cmd(a: &SynthArgs) -> Outcome {
    let cfg = load_config(&a.common)?;
    if a.count == 0 || a.jobs == 0 {
        return Err(Failure::usage(anyhow!("--count and --jobs must be positive")));
    }
    if a.count == 1 && cfg.benchmark.is_none() {
        validated(cfg.scene.validate())?;
        std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        synth::write_scene(&cfg.scene, &a.out)?;
        info!("wrote {} frames to {}", cfg.scene.frame_count(), a.out.display());
        return Ok(());
    }
    let mut bench = cfg.benchmark.unwrap_or(BenchmarkConfig {
        scene: cfg.scene,
        ..BenchmarkConfig::default()
    });
    if a.count > 1 {
        bench.count = a.count;
    }
    validated(bench.validate())?;
    let scenes = (0..bench.count).map(|i| bench.scene_for(i)).collect::<crate::Result<Vec<_>>>()?;
    train_eval::write_benchmark(&a.out, bench.count, a.jobs, |i| scenes[i].clone())?;
    info!("wrote {} videos to {}", bench.count, a.out.display());
    Ok(())
}

fn load_video(v: &VideoArgs) -> anyhow::Result<(media_io::FrameSequence, media_io::LandmarkTrack, AnchorMap)> {
    let anchors_path = resolve(&v.anchors, &v.video, ANCHORS_FILE);
    let anchors = AnchorMap::load(&anchors_path)?;
    let frames = media_io::load_frame_sequence(&v.video)?;
    let track = media_io::load_landmarks(resolve(&v.landmarks, &v.video, LANDMARKS_FILE), anchors)?;
    Ok((frames, track, anchors))
}

fn video_id(video: &Path) -> String {
    video
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "video".into())
}

fn embed_cmd(a: &EmbedArgs) -> Outcome {
    let scales = validated(ScaleSet::parse_list(&a.scales))?;
    let (frames, track, anchors) = load_video(&a.video)?;
    let pair = embedding::embed_sequence(&frames, &track, &anchors, &scales)?;
    let out = a.out.clone().unwrap_or_else(|| a.video.video.with_extension("mmop"));
    pair.save(&out)?;
    pair.save_sidecar(&out, &video_id(&a.video.video))?;
    println!("{}: {} rows x {} frames at {} fps", out.display(), pair.rows(), pair.cols(), pair.fps());
    Ok(())
}

#[derive(Serialize)]
struct BaselineResult<'a> {
    video: String,
    method: &'a str,
    hr_bpm: f64,
}

fn baseline_cmd(a: &BaselineArgs) -> Outcome {
    let method: Method = validated(a.method.parse())?;
    let (frames, track, anchors) = load_video(&a.video)?;
    let trace = baselines::rgb_trace(&frames, &track, &anchors)?;
    let hr = baselines::estimate(method, &trace)?;
    println!("{hr:.2}");
    if let Some(out) = &a.out {
        let r = BaselineResult {
            video: video_id(&a.video.video),
            method: &a.method,
            hr_bpm: hr,
        };
        media_io::write_json(out, &r)?;
    }
    Ok(())
}

fn run_config(a: &ModelRunArgs) -> std::result::Result<(TrainConfig, Variant), Failure> {
    let mut cfg = load_config(&a.common)?.train;
    if let Some(s) = &a.scales {
        cfg.scales = validated(ScaleSet::parse_list(s))?;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    let variant = validated(a.variant.parse())?;
    Ok((cfg, variant))
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let (mut cfg, variant) = run_config(&a.run)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    validated(cfg.validate())?;
    let data = train_eval::make_dataset(&a.run.data, &cfg, variant)?;
    let clips = data.training_clips(&cfg)?;
    info!("{} clips from {} videos", clips.len(), data.videos.len());
    let out = train_eval::train_clips(&data, &clips, &cfg, |e, l, _| println!("epoch {e} loss {l:.6}"))?;
    let meta = serde_json::json!({
        "variant": variant,
        "fps": data.fps,
        "epoch_losses": out.epoch_losses,
        "train": cfg,
    });
    checkpoint::save(&a.out, &out.model, meta)?;
    info!("saved {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Outcome {
    let (cfg, variant) = run_config(&a.run)?;
    validated(cfg.validate())?;
    let report = train_eval::evaluate_dir(&a.run.data, &a.model, &cfg, variant)?;
    report.save(&a.out)?;
    let m = &report.metrics;
    println!(
        "{} videos: MAE {:.3} RMSE {:.3} mean {:.3} std {:.3} r {:.4}",
        report.videos.len(),
        m.mae,
        m.rmse,
        m.mean_err,
        m.std_err,
        m.pearson_r
    );
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Outcome {
    let suite = gradcheck::run_suite(a.seed)?;
    for c in &suite {
        println!(
            "{:<24} {:>6} scalars  rel error {:.3e}  {}",
            c.name,
            c.scalars,
            c.rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        media_io::write_json(out, &suite)?;
    }
    if suite.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(anyhow!("gradient check failed").into())
    }
}

fn selftest_cmd(a: &SelftestArgs) -> Outcome {
    let tmp;
    let work = match &a.out {
        Some(p) => p.clone(),
        None => {
            tmp = tempfile::tempdir().context("creating scratch directory")?;
            tmp.path().to_path_buf()
        }
    };
    let results = crate::selftest::run(a.seed, &work);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(anyhow!("{failed} of {} checks failed", results.len()).into())
    }
}

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Selftest(a) => selftest_cmd(a),
    }
}

/// Parses `argv` and runs it, returning the process exit status.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}
