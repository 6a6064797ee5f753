//! Fast end-to-end health check on tiny generated inputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{self, Method};
use crate::embedding::{embed_sequence, window_grid, ScaleSet};
use crate::error::Result;
use crate::media_io::{Frame, FrameSequence};
use crate::nn::attention::{full_attention, probsparse_attention};
use crate::nn::{gradcheck, EncoderConfig, Tensor};
use crate::signals::{ecg_hr, metrics};
use crate::synth::{self, HrTrajectory, SceneConfig};
use crate::train_eval::{self, TrainConfig, Variant};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn tiling() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for w in (20..=500).step_by(49) {
        for h in (20..=500).step_by(49) {
            for n in [25, 81, 169] {
                let g = window_grid(w, h, n)?;
                let (ex, ey) = g.extent();
                worst = worst.max((ex - w as f64).abs()).max((ey - h as f64).abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("max extent error {worst:e}")))
}

fn tiny_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        fps: 10.0,
        duration: 3.0,
        seed,
        ..SceneConfig::default()
    }
}

fn shape_and_translation(seed: u64) -> Result<(bool, String)> {
    let (seq, track, _) = synth::render_scene(&tiny_scene(seed))?;
    let pair = embed_sequence(&seq, &track, track.anchors(), &ScaleSet::standard())?;
    let shape_ok = pair.rows() == 825 && pair.fore.map.cols() == pair.back.map.cols();
    let (dx, dy) = (3usize, 2usize);
    let shifted: Vec<Frame> = seq
        .frames()
        .iter()
        .map(|f| shift_frame(f, dx, dy))
        .collect::<Result<_>>()?;
    let shifted = FrameSequence::new(shifted, seq.fps())?;
    let moved = embed_sequence(&shifted, &track.translated(dx as f64, dy as f64), track.anchors(), &ScaleSet::standard())?;
    let same = moved.fore.map == pair.fore.map;
    Ok((shape_ok && same, format!("rows {}, translated fore map identical: {same}", pair.rows())))
}

/// Content moved right/down by whole pixels; vacated pixels are black.
fn shift_frame(f: &Frame, dx: usize, dy: usize) -> Result<Frame> {
    let (w, h) = (f.width(), f.height());
    let mut px = vec![0u8; w * h * 3];
    for y in dy..h {
        for x in dx..w {
            let src = ((y - dy) * w + (x - dx)) * 3;
            let dst = (y * w + x) * 3;
            px[dst..dst + 3].copy_from_slice(&f.pixels()[src..src + 3]);
        }
    }
    Frame::new(w, h, px)
}

fn attention_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let l = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let mut t = || Tensor::<f32>::new(vec![l, d], (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (q, k, v) = (t()?, t()?, t()?);
        let full = full_attention(&q, &k, &v)?;
        let (sparse, _) = probsparse_attention(&q, &k, &v, l, &mut ChaCha8Rng::seed_from_u64(seed))?;
        for (a, b) in full.data().iter().zip(sparse.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    Ok((worst < 1e-6, format!("max |diff| {worst:e}")))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let suite = gradcheck::run_suite(seed)?;
    let worst = suite.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = suite.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok((failed.is_empty(), format!("{} checks, max rel error {worst:e}, failed {failed:?}", suite.len())))
}

fn baselines_recover(seed: u64) -> Result<(bool, String)> {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    let (seq, track, _) = synth::render_scene(&cfg)?;
    let trace = baselines::rgb_trace(&seq, &track, track.anchors())?;
    let est = [Method::Green, Method::Chrom, Method::Pos]
        .iter()
        .map(|m| baselines::estimate(*m, &trace))
        .collect::<Result<Vec<f64>>>()?;
    Ok((est.iter().all(|e| (e - 72.0).abs() <= 2.0), format!("green/chrom/pos {est:.2?}")))
}

fn ecg(seed: u64) -> Result<(bool, String)> {
    let mut got = Vec::new();
    for bpm in [60.0, 75.0, 150.0] {
        got.push(ecg_hr(&synth::synth_ecg(bpm, 256.0, 30.0, seed)?)?);
    }
    let ok = got.iter().zip([60.0, 75.0, 150.0]).all(|(g, t)| (g - t).abs() <= 1.0);
    Ok((ok, format!("recovered {got:.2?}")))
}

fn metric_oracle() -> Result<(bool, String)> {
    let m = metrics(&[70.0, 80.0], &[72.0, 78.0])?;
    let id = metrics(&[60.0, 70.0, 90.0], &[60.0, 70.0, 90.0])?;
    let ok = (m.mae - 2.0).abs() < 1e-9
        && (m.rmse - 2.0).abs() < 1e-9
        && m.mean_err.abs() < 1e-9
        && (m.std_err - 8f64.sqrt()).abs() < 1e-9
        && (id.pearson_r - 1.0).abs() < 1e-12;
    Ok((ok, format!("{m:?}")))
}

fn determinism(seed: u64, work: &Path) -> Result<(bool, String)> {
    let mut runs = Vec::new();
    for k in 0..2 {
        let root = work.join(format!("run{k}"));
        train_eval::write_benchmark(&root, 2, 1, |i| SceneConfig {
            hr_bpm: HrTrajectory::constant(60.0 + 20.0 * i as f64).expect("valid rate"),
            ..tiny_scene(seed + i as u64)
        })?;
        let cfg = TrainConfig {
            clip_seconds: 2.0,
            stride_seconds: 0.5,
            epochs: 2,
            batch_size: 4,
            seed,
            encoder: EncoderConfig {
                d_model: 16,
                d_ff: 32,
                layers: 2,
                ..EncoderConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = train_eval::make_dataset(&root, &cfg, Variant::Full)?;
        let losses = train_eval::train(&data, &cfg)?.epoch_losses;
        let mut maps = Vec::new();
        for dir in train_eval::video_dirs(&root)? {
            for e in std::fs::read_dir(&dir).map_err(|e| crate::Error::io(&dir, e))? {
                let p = e.map_err(|e| crate::Error::io(&dir, e))?.path();
                if p.extension().is_some_and(|x| x == "mmop") {
                    maps.push(std::fs::read(&p).map_err(|e| crate::Error::io(&p, e))?);
                }
            }
        }
        runs.push((maps, losses));
    }
    let same = runs[0] == runs[1] && !runs[0].0.is_empty();
    Ok((same, format!("losses {:?}", runs[0].1)))
}

/// Runs every quick check; `work` receives scratch files.
pub fn run(seed: u64, work: &Path) -> Vec<CheckResult> {
    vec![
        outcome("embedding tiling", tiling()),
        outcome("shape law and pixel-copy invariance", shape_and_translation(seed)),
        outcome("attention oracle", attention_oracle(seed)),
        outcome("gradient checks", gradients(seed)),
        outcome("baseline recovery", baselines_recover(seed)),
        outcome("ecg heart rate", ecg(seed)),
        outcome("metrics oracle", metric_oracle()),
        outcome("determinism", determinism(seed, work)),
    ]
}
