//! Dataset assembly, training on clip-level L1 loss, and clip-averaged evaluation.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{self, clip_frames, normalize_clip, ClipFeatures, MastMopPair, ScaleSet};
use crate::error::{Error, Result};
use crate::media_io::{self, AnchorMap, ANCHORS_FILE, LANDMARKS_FILE};
use crate::nn::graph::Graph;
use crate::nn::model::{clip_tokens, ForwardOptions, Model};
use crate::nn::{Adam, EncoderConfig, ModelConfig, Tensor};
use crate::signals::{ecg_hr, metrics, MetricsReport, TimeSeries};
use crate::synth::{GtFile, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Face and background streams over multi-scale overlapping maps.
    Full,
    /// Face stream only over multi-scale overlapping maps.
    FsOnly,
    /// Face and background streams over resized single-scale maps.
    FsBsStmap,
    /// Face stream only over resized single-scale maps.
    FsStmap,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::FsOnly, Variant::FsBsStmap, Variant::FsStmap];

    pub fn two_stream(self) -> bool {
        matches!(self, Variant::Full | Variant::FsBsStmap)
    }

    pub fn resized_map(self) -> bool {
        matches!(self, Variant::FsBsStmap | Variant::FsStmap)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FsOnly => "fs_only",
            Variant::FsBsStmap => "fs_bs_stmap",
            Variant::FsStmap => "fs_stmap",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s}; use full, fs_only, fs_bs_stmap or fs_stmap")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_seconds: f64,
    pub stride_seconds: f64,
    pub seed: u64,
    /// Start and length of the evaluation window; the window is cut into
    /// non-overlapping clips whose predictions are averaged.
    pub eval_start_seconds: f64,
    pub eval_clip_seconds: f64,
    pub scales: ScaleSet,
    /// Frame rate all maps are resampled to; `None` adopts the first video's rate.
    pub canonical_fps: Option<f64>,
    /// Block grid `n` and resize target of the resized-map variants.
    pub stmap_n: usize,
    pub stmap_size: [usize; 2],
    pub encoder: EncoderConfig,
    pub mlp_hidden: usize,
    /// Start the output bias at the mean training label.
    pub init_bias_to_mean: bool,
    /// Cache embeddings as `.mmop` files inside each video directory.
    pub cache_embeddings: bool,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 80,
            batch_size: 16,
            clip_seconds: 10.0,
            stride_seconds: 0.5,
            seed: 0,
            eval_start_seconds: 10.0,
            eval_clip_seconds: 30.0,
            scales: ScaleSet::standard(),
            canonical_fps: None,
            stmap_n: 25,
            stmap_size: [32, 32],
            encoder: EncoderConfig::default(),
            mlp_hidden: 64,
            init_bias_to_mean: true,
            cache_embeddings: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("lr", self.lr),
            ("clip_seconds", self.clip_seconds),
            ("stride_seconds", self.stride_seconds),
            ("eval_clip_seconds", self.eval_clip_seconds),
        ];
        if let Some((name, v)) = pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.jobs == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("epochs, batch_size, jobs and mlp_hidden must be positive"));
        }
        if self.stride_seconds > self.clip_seconds {
            return Err(Error::invalid(format!(
                "stride {} s exceeds clip {} s",
                self.stride_seconds, self.clip_seconds
            )));
        }
        if self.eval_start_seconds < 0.0 {
            return Err(Error::invalid("eval_start_seconds must be non-negative"));
        }
        if let Some(f) = self.canonical_fps {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::invalid(format!("canonical_fps {f}")));
            }
        }
        ScaleSet::new(vec![self.stmap_n])?;
        self.encoder.validate()
    }

    pub fn model_config(&self, input_rows: usize, fps: f64, variant: Variant) -> ModelConfig {
        ModelConfig {
            input_rows,
            clip_len: clip_frames(fps, self.clip_seconds),
            encoder: self.encoder.clone(),
            mlp_hidden: self.mlp_hidden,
            two_stream: variant.two_stream(),
        }
    }
}

/// Where a video's heart-rate labels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    PerFrame { hr: Vec<f64>, fps: f64 },
    Ecg(TimeSeries),
}

impl LabelSource {
    /// Heart rate over `[t0, t1)` seconds.
    pub fn label(&self, t0: f64, t1: f64) -> Result<f64> {
        match self {
            LabelSource::PerFrame { hr, fps } => {
                let a = ((t0 * fps).ceil().max(0.0) as usize).min(hr.len());
                let b = ((t1 * fps).ceil().max(0.0) as usize).min(hr.len());
                if b <= a {
                    return Err(Error::invalid(format!("no labelled frames in [{t0}, {t1}) s")));
                }
                Ok(hr[a..b].iter().sum::<f64>() / (b - a) as f64)
            }
            LabelSource::Ecg(ecg) => ecg_hr(&ecg.window(t0, t1)?),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gt = GtFile::load(dir)?;
        if let Some(hr) = gt.hr_per_frame {
            let fps = media_io::read_manifest(dir)?.fps;
            return Ok(LabelSource::PerFrame { hr, fps });
        }
        if let Some(ecg) = gt.ecg {
            return Ok(LabelSource::Ecg(TimeSeries::load_csv(dir.join(&ecg.path), ecg.fs as f64)?));
        }
        Err(Error::invalid(format!("{}: gt.json has neither hr_per_frame nor ecg", dir.display())))
    }
}

#[derive(Debug, Clone)]
pub struct VideoEntry {
    pub id: String,
    pub pair: MastMopPair,
    pub labels: LabelSource,
}

/// Embedded videos sharing one frame rate and map height.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoEntry>,
    pub variant: Variant,
    pub fps: f64,
    pub rows: usize,
}

/// One training clip: video index, first column, label in bpm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRef {
    pub video: usize,
    pub start: usize,
    pub label: f64,
}

fn cache_name(config: &TrainConfig, variant: Variant) -> String {
    if variant.resized_map() {
        format!("stmap_{}_{}x{}.mmop", config.stmap_n, config.stmap_size[0], config.stmap_size[1])
    } else {
        let s: Vec<String> = config.scales.scales().iter().map(|n| n.to_string()).collect();
        format!("mast_mop_{}.mmop", s.join("-"))
    }
}

/// Embeds one video directory (frames, `landmarks.csv`, `anchors.json`).
pub fn embed_video_dir(dir: &Path, config: &TrainConfig, variant: Variant) -> Result<MastMopPair> {
    let cache = dir.join(cache_name(config, variant));
    if config.cache_embeddings && cache.exists() {
        if let Ok(pair) = MastMopPair::load(&cache) {
            return Ok(pair);
        }
        warn!("{}: ignoring unreadable cache", cache.display());
    }
    let anchors = AnchorMap::load(dir.join(ANCHORS_FILE))?;
    let frames = media_io::load_frame_sequence(dir)?;
    let track = media_io::load_landmarks(dir.join(LANDMARKS_FILE), anchors)?;
    let pair = if variant.resized_map() {
        let [w, h] = config.stmap_size;
        embedding::stmap_resized_pair(&frames, &track, &anchors, config.stmap_n, (w, h))?
    } else {
        embedding::embed_sequence(&frames, &track, &anchors, &config.scales)?
    };
    if config.cache_embeddings {
        pair.save(&cache)?;
    }
    Ok(pair)
}

/// Sub-directories holding a `manifest.json`, sorted by name.
pub fn video_dirs(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(media_io::MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn parallel_map<T: Sync, U: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let results: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    Ok(results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Embeds (or loads cached maps for) every video under `data_dir`.
pub fn make_dataset(data_dir: impl AsRef<Path>, config: &TrainConfig, variant: Variant) -> Result<Dataset> {
    config.validate()?;
    let dirs = video_dirs(data_dir.as_ref())?;
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no videos under {}", data_dir.as_ref().display())));
    }
    let loaded = parallel_map(&dirs, config.jobs, |d| {
        let labels = LabelSource::load(d)?;
        let pair = embed_video_dir(d, config, variant)?;
        let id = d.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
        Ok(VideoEntry { id, pair, labels })
    })?;
    let fps = config.canonical_fps.unwrap_or_else(|| loaded[0].pair.fps());
    let t = clip_frames(fps, config.clip_seconds);
    let mut videos = Vec::with_capacity(loaded.len());
    for mut v in loaded {
        if (v.pair.fps() - fps).abs() > 1e-9 {
            v.pair = v.pair.resampled(fps)?;
        }
        if v.pair.cols() < t {
            warn!("{}: {} frames is shorter than one {t}-frame clip, skipped", v.id, v.pair.cols());
            continue;
        }
        videos.push(v);
    }
    if videos.is_empty() {
        return Err(Error::invalid("every video is shorter than one clip"));
    }
    let rows = videos[0].pair.rows();
    if let Some(v) = videos.iter().find(|v| v.pair.rows() != rows) {
        return Err(Error::shape(format!("{} has {} map rows, expected {rows}", v.id, v.pair.rows())));
    }
    Ok(Dataset {
        videos,
        variant,
        fps,
        rows,
    })
}

impl Dataset {
    pub fn clip_len(&self, config: &TrainConfig) -> usize {
        clip_frames(self.fps, config.clip_seconds)
    }

    /// Overlapping training clips (`clip_seconds` long, `stride_seconds` apart) with labels.
    pub fn training_clips(&self, config: &TrainConfig) -> Result<Vec<ClipRef>> {
        let t = self.clip_len(config);
        let step = clip_frames(self.fps, config.stride_seconds);
        if step == 0 {
            return Err(Error::invalid("stride rounds to zero frames"));
        }
        let mut out = Vec::new();
        for (vi, v) in self.videos.iter().enumerate() {
            for k in 0..=(v.pair.cols() - t) / step {
                let start = k * step;
                let label = v
                    .labels
                    .label(start as f64 / self.fps, (start + t) as f64 / self.fps)?;
                out.push(ClipRef { video: vi, start, label });
            }
        }
        Ok(out)
    }

    /// Normalised clip starting at column `start`.
    pub fn clip(&self, video: usize, start: usize, len: usize) -> ClipFeatures {
        let p = &self.videos[video].pair;
        normalize_clip(ClipFeatures {
            fore: p.fore.map.column_slice(start, len),
            back: p.back.map.column_slice(start, len),
            start_frame: start,
            fps: self.fps,
            hr_gt: None,
            normalized: false,
        })
    }

    /// Start columns of the non-overlapping evaluation clips of one video.
    pub fn eval_starts(&self, video: usize, config: &TrainConfig) -> Vec<usize> {
        let t = self.clip_len(config);
        let total = self.videos[video].pair.cols();
        let window = clip_frames(self.fps, config.eval_clip_seconds).max(t);
        let mut start = clip_frames(self.fps, config.eval_start_seconds);
        // shift the window back when the video ends early, keeping at least one clip
        if start + t > total {
            start = total - t;
        }
        let end = (start + window).min(total);
        let count = ((end - start) / t).max(1);
        (0..count).map(|k| start + k * t).collect()
    }
}

/// Token matrices of a clip for the given model.
pub fn clip_inputs(clip: &ClipFeatures, two_stream: bool) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let fore = clip_tokens(&clip.fore);
    let back = two_stream.then(|| clip_tokens(&clip.back));
    (fore, back)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z = x ^ (x >> 31);
    }
    z
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean absolute clip error per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Adam on the summed L1 loss of shuffled mini-batches.
pub fn train_clips(
    data: &Dataset,
    clips: &[ClipRef],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &Model<f32>),
) -> Result<TrainOutcome> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    let variant = data.variant;
    let model_cfg = config.model_config(data.rows, data.fps, variant);
    let mut model = Model::<f32>::init(model_cfg, config.seed)?;
    if config.init_bias_to_mean {
        let mean = clips.iter().map(|c| c.label).sum::<f64>() / clips.len() as f64;
        model.set_output_bias(mean);
    }
    let t = data.clip_len(config);
    let mut adam = Adam::new(&model.params, config.lr);
    let mut grads = model.params.zeros_like();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, 1]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            grads.zero();
            for &ci in batch {
                let c = clips[ci];
                let clip = data.clip(c.video, c.start, t);
                let (fore, back) = clip_inputs(&clip, variant.two_stream());
                let seed = mix_seed(&[config.seed, epoch as u64, b as u64, ci as u64]);
                let mut g = Graph::new(&model.params, true, seed);
                let out = model.forward(&mut g, &fore, back.as_ref(), ForwardOptions::default())?;
                let loss = g.l1(out, &[c.label as f32])?;
                let lv = g.value(loss).item() as f64;
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b}, clip {ci} (video {}, frame {})",
                        data.videos[c.video].id, c.start
                    )));
                }
                total += lv;
                g.backward(loss, &mut grads)?;
            }
            adam.step(&mut model.params, &grads)?;
        }
        let mean = total / clips.len() as f64;
        info!("epoch {epoch}: mean L1 {mean:.4} bpm");
        on_epoch(epoch, mean, &model);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
        steps: adam.steps(),
    })
}

pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let clips = data.training_clips(config)?;
    info!("training {} on {} clips from {} videos", data.variant.tag(), clips.len(), data.videos.len());
    train_clips(data, &clips, config, |_, _, _| {})
}

/// Prediction for one normalised clip, dropout off.
pub fn predict_clip(model: &Model<f32>, clip: &ClipFeatures, seed: u64, opts: ForwardOptions) -> Result<f64> {
    let (fore, back) = clip_inputs(clip, model.config.two_stream);
    let mut g = Graph::new(&model.params, false, seed);
    let out = model.forward(&mut g, &fore, back.as_ref(), opts)?;
    Ok(g.value(out).item() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub id: String,
    pub hr_pred: f64,
    pub hr_gt: f64,
    #[serde(default)]
    pub clip_preds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoPrediction>,
    pub metrics: MetricsReport,
    pub variant: Variant,
    pub config: TrainConfig,
}

impl EvalReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        media_io::write_json(path.as_ref(), self)
    }
}

/// Per-video clip-averaged predictions over the evaluation window.
pub fn predict_videos(model: &Model<f32>, data: &Dataset, config: &TrainConfig) -> Result<Vec<VideoPrediction>> {
    let expected = config.model_config(data.rows, data.fps, data.variant);
    if model.config != expected {
        return Err(Error::shape(format!(
            "checkpoint config {:?} does not match data/config {:?}",
            model.config, expected
        )));
    }
    let t = data.clip_len(config);
    let idx: Vec<usize> = (0..data.videos.len()).collect();
    parallel_map(&idx, config.jobs, |&vi| {
        let starts = data.eval_starts(vi, config);
        let clip_preds = starts
            .iter()
            .map(|&s| {
                let clip = data.clip(vi, s, t);
                predict_clip(model, &clip, mix_seed(&[config.seed, vi as u64, s as u64]), ForwardOptions::default())
            })
            .collect::<Result<Vec<f64>>>()?;
        let hr_pred = clip_preds.iter().sum::<f64>() / clip_preds.len() as f64;
        let first = starts[0] as f64 / data.fps;
        let last = (starts[starts.len() - 1] + t) as f64 / data.fps;
        let hr_gt = data.videos[vi].labels.label(first, last)?;
        Ok(VideoPrediction {
            id: data.videos[vi].id.clone(),
            hr_pred,
            hr_gt,
            clip_preds,
        })
    })
}

pub fn evaluate(model: &Model<f32>, data: &Dataset, config: &TrainConfig) -> Result<EvalReport> {
    let videos = predict_videos(model, data, config)?;
    let p: Vec<f64> = videos.iter().map(|v| v.hr_pred).collect();
    let g: Vec<f64> = videos.iter().map(|v| v.hr_gt).collect();
    Ok(EvalReport {
        metrics: metrics(&p, &g)?,
        videos,
        variant: data.variant,
        config: config.clone(),
    })
}

/// Loads a checkpoint and evaluates it on every video under `test_dir`.
pub fn evaluate_dir(test_dir: impl AsRef<Path>, checkpoint: impl AsRef<Path>, config: &TrainConfig, variant: Variant) -> Result<EvalReport> {
    let data = make_dataset(test_dir, config, variant)?;
    let expected = config.model_config(data.rows, data.fps, variant);
    let model = crate::nn::checkpoint::load_into(checkpoint, &expected)?;
    evaluate(&model, &data, config)
}

/// Writes `count` scenes named `v000`, `v001`, ... under `dir`, each from
/// `make(i)`.
pub fn write_benchmark(dir: impl AsRef<Path>, count: usize, jobs: usize, make: impl Fn(usize) -> SceneConfig + Sync) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let idx: Vec<usize> = (0..count).collect();
    parallel_map(&idx, jobs, |&i| {
        let sub = dir.join(format!("v{i:03}"));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        crate::synth::write_scene(&make(i), &sub).map(|_| ())
    })?;
    Ok(())
}
