//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run everything with `cargo test --release --test acceptance`. Pass criterion
//! numbers after `--` to run a subset, e.g. `-- 1 4 10`. Setting
//! `RPPG_SKIP_BENCH=1` skips the two benchmark-scale training criteria (7, 8),
//! which take about an hour and a half on one core; they are then reported as SKIP.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rppg::baselines::{self, Method};
use rppg::embedding::{embed_sequence, window_grid, ScaleSet};
use rppg::media_io::{Frame, FrameSequence};
use rppg::nn::attention::{full_attention, probsparse_attention};
use rppg::nn::{gradcheck, Tensor};
use rppg::signals::{ecg_hr, metrics};
use rppg::synth::{self, BackgroundStyle, BenchmarkConfig, HrTrajectory, SceneConfig};
use rppg::train_eval::{self, TrainConfig, Variant};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tiling() -> Check {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for w in (20..=500).step_by(7) {
        for h in (20..=500).step_by(7) {
            for n in [25usize, 81, 169] {
                let g = window_grid(w, h, n).map_err(err)?;
                let side = (n as f64).sqrt();
                // expected geometry from first principles: 2 * extent / (sqrt(n) + 1), half-window step
                for (extent, ws, step) in [(w as f64, g.ws.0, g.step.0), (h as f64, g.ws.1, g.step.1)] {
                    let ws_ref = 2.0 * extent / (side + 1.0);
                    worst = worst
                        .max((ws + (side - 1.0) * step - extent).abs())
                        .max((ws - ws_ref).abs())
                        .max((step - ws_ref / 2.0).abs());
                }
                cases += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((worst <= 1e-9 && secs < 10.0, format!("{cases} cases, max error {worst:.1e}, {secs:.2} s")))
}

fn scene(width: usize, height: usize, fps: f64, seconds: f64, seed: u64) -> SceneConfig {
    SceneConfig {
        width,
        height,
        fps,
        duration: seconds,
        seed,
        ..SceneConfig::default()
    }
}

fn shape_law() -> Check {
    let expected = 3 * (25 + 81 + 169);
    let videos = [
        scene(96, 80, 30.0, 2.0, 1),
        scene(160, 120, 15.0, 3.0, 2),
        SceneConfig {
            motion_amp: 6.0,
            bg_style: BackgroundStyle::Noise,
            ..scene(128, 96, 25.0, 2.0, 3)
        },
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for cfg in &videos {
        let (seq, track, _) = synth::render_scene(cfg).map_err(err)?;
        let pair = embed_sequence(&seq, &track, track.anchors(), &ScaleSet::standard()).map_err(err)?;
        let f = (pair.fore.map.rows(), pair.fore.map.cols());
        let b = (pair.back.map.rows(), pair.back.map.cols());
        ok &= f == (expected, seq.len()) && f == b;
        notes.push(format!("{}x{}: fore {f:?} back {b:?}", cfg.width, cfg.height));
    }
    Ok((ok, notes.join("; ")))
}

/// Copies `f` so that pixel (x, y) lands on (x + dx, y + dy); uncovered pixels are grey.
fn translate(f: &Frame, dx: i64, dy: i64) -> Frame {
    let (w, h) = (f.width() as i64, f.height() as i64);
    let mut px = vec![128u8; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if (0..w).contains(&sx) && (0..h).contains(&sy) {
                let s = ((sy * w + sx) * 3) as usize;
                let d = ((y * w + x) * 3) as usize;
                px[d..d + 3].copy_from_slice(&f.pixels()[s..s + 3]);
            }
        }
    }
    Frame::new(w as usize, h as usize, px).expect("same size")
}

fn no_resize() -> Check {
    let cfg = SceneConfig {
        motion_amp: 3.0,
        ..scene(120, 100, 15.0, 2.0, 5)
    };
    let (seq, track, _) = synth::render_scene(&cfg).map_err(err)?;
    let base = embed_sequence(&seq, &track, track.anchors(), &ScaleSet::standard()).map_err(err)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for (dx, dy) in [(3i64, 2i64), (-5, 4), (7, -3), (0, 1)] {
        let frames: Vec<Frame> = seq.frames().iter().map(|f| translate(f, dx, dy)).collect();
        let moved_seq = FrameSequence::new(frames, seq.fps()).map_err(err)?;
        let moved_track = track.translated(dx as f64, dy as f64);
        let moved = embed_sequence(&moved_seq, &moved_track, track.anchors(), &ScaleSet::standard()).map_err(err)?;
        let same = moved.fore.map.data() == base.fore.map.data();
        ok &= same;
        notes.push(format!("({dx},{dy}) {}", if same { "identical" } else { "differs" }));
    }
    Ok((ok, notes.join(", ")))
}

/// softmax(q k^T / sqrt(d)) v evaluated elementwise in 64-bit.
fn naive_attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>) -> Vec<f64> {
    let (lq, d) = q.dims2();
    let (lk, dv) = v.dims2();
    let at = |t: &Tensor<f32>, r: usize, c: usize, w: usize| t.data()[r * w + c] as f64;
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let s: Vec<f64> = (0..lk)
            .map(|j| (0..d).map(|c| at(q, i, c, d) * at(k, j, c, d)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let top = s.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = s.iter().map(|x| (x - top).exp()).sum();
        for (j, sj) in s.iter().enumerate() {
            for c in 0..dv {
                out[i * dv + c] += (sj - top).exp() / z * at(v, j, c, dv);
            }
        }
    }
    out
}

fn attention_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    let mut worst_naive = 0.0f64;
    for _ in 0..100 {
        let lq = rng.random_range(1..=64);
        let lk = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let dv = rng.random_range(1..=32);
        let mut t = |r: usize, c: usize| {
            Tensor::<f32>::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
        };
        let (q, k, v) = (t(lq, d), t(lk, d), t(lk, dv));
        // a factor of max(L_Q, L_K) makes u = L_Q and samples every key
        let factor = lq.max(lk);
        let full = full_attention(&q, &k, &v).map_err(err)?;
        let (sparse, _) = probsparse_attention(&q, &k, &v, factor, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
        for (a, b) in full.data().iter().zip(sparse.data()) {
            worst = worst.max((a - b).abs() as f64);
        }
        for (a, b) in naive_attention(&q, &k, &v).iter().zip(sparse.data()) {
            worst_naive = worst_naive.max((a - *b as f64).abs());
        }
    }
    Ok((
        worst < 1e-6 && worst_naive < 1e-5,
        format!("100 cases, max |sparse - full| {worst:.2e}, max |sparse - 64-bit reference| {worst_naive:.2e}"),
    ))
}

fn gradient_checks() -> Check {
    let t0 = Instant::now();
    let suite = gradcheck::run_suite(7).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    let worst = suite.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let bad: Vec<String> = suite
        .iter()
        .filter(|c| !(c.rel_error < 1e-4))
        .map(|c| format!("{} {:.1e}", c.name, c.rel_error))
        .collect();
    let model_checked = suite.iter().filter(|c| c.name.starts_with("model")).count();
    Ok((
        bad.is_empty() && model_checked >= 1 && secs < 300.0 && gradcheck::FD_STEP == 1e-3,
        format!(
            "{} checks ({model_checked} whole-model), max rel error {worst:.2e}, {secs:.1} s, failing {bad:?}",
            suite.len()
        ),
    ))
}

fn baseline_recovery() -> Check {
    let cfg = SceneConfig {
        duration: 30.0,
        fps: 30.0,
        hr_bpm: HrTrajectory::constant(72.0).map_err(err)?,
        pulse_amp: 0.03,
        illum_amp: 0.0,
        sensor_sigma: 0.0,
        ..SceneConfig::default()
    };
    let (seq, track, _) = synth::render_scene(&cfg).map_err(err)?;
    let trace = baselines::rgb_trace(&seq, &track, track.anchors()).map_err(err)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for m in [Method::Green, Method::Chrom, Method::Pos] {
        let hr = baselines::estimate(m, &trace).map_err(err)?;
        ok &= (hr - 72.0).abs() <= 2.0;
        notes.push(format!("{m:?} {hr:.2}"));
    }
    Ok((ok, notes.join(", ")))
}

/// Low-resolution 10 fps scenes with heart rates spread over 50-110 bpm.
fn benchmark(count: usize, seed: u64, seconds: f64, illum_ratio: f64) -> BenchmarkConfig {
    let pulse = 0.03;
    BenchmarkConfig {
        count,
        hr_range: [50.0, 110.0],
        scene: SceneConfig {
            width: 80,
            height: 64,
            face_rx: 0.25,
            fps: 10.0,
            duration: seconds,
            seed,
            pulse_amp: pulse,
            illum_amp: illum_ratio * pulse,
            sensor_sigma: 0.5,
            ..SceneConfig::default()
        },
    }
}

fn write_split(root: &Path, name: &str, cfg: &BenchmarkConfig) -> Result<std::path::PathBuf, String> {
    let dir = root.join(name);
    let scenes = (0..cfg.count).map(|i| cfg.scene_for(i)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    train_eval::write_benchmark(&dir, cfg.count, 1, |i| scenes[i].clone()).map_err(err)?;
    Ok(dir)
}

/// Train videos last 12 s (five clips each); test videos 40 s so the 10-40 s
/// evaluation window holds three clips.
fn benchmark_splits(root: &Path, illum_ratio: f64) -> Result<(std::path::PathBuf, std::path::PathBuf), String> {
    let train = write_split(root, "train", &benchmark(200, 11, 12.0, illum_ratio))?;
    let test = write_split(root, "test", &benchmark(50, 97, 40.0, illum_ratio))?;
    Ok((train, test))
}

fn train_and_test(train: &Path, test: &Path, cfg: &TrainConfig, variant: Variant) -> Result<(f64, Vec<f64>), String> {
    let tr = train_eval::make_dataset(train, cfg, variant).map_err(err)?;
    let te = train_eval::make_dataset(test, cfg, variant).map_err(err)?;
    let out = train_eval::train(&tr, cfg).map_err(err)?;
    let report = train_eval::evaluate(&out.model, &te, cfg).map_err(err)?;
    Ok((report.metrics.mae, out.epoch_losses))
}

fn two_stream_advantage() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (train, test) = benchmark_splits(dir.path(), 5.0)?;
    let mut ok = true;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        // default budget; dropout off so both variants leave the mean-prediction plateau
        let cfg = TrainConfig {
            seed,
            encoder: rppg::nn::EncoderConfig {
                dropout: 0.0,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let (full, _) = train_and_test(&train, &test, &cfg, Variant::Full)?;
        let (single, _) = train_and_test(&train, &test, &cfg, Variant::FsOnly)?;
        ok &= full < single;
        notes.push(format!("seed {seed}: full {full:.2} vs fs_only {single:.2}"));
        eprintln!("  criterion 7 {} ({:.0} s)", notes.last().expect("just pushed"), t0.elapsed().as_secs_f64());
    }
    let elapsed = t0.elapsed();
    ok &= elapsed <= Duration::from_secs(2 * 3600);
    notes.push(format!("{:.1} min", elapsed.as_secs_f64() / 60.0));
    Ok((ok, notes.join("; ")))
}

fn end_to_end() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let (train, test) = benchmark_splits(dir.path(), 1.0)?;
    let cfg = TrainConfig::default();
    let (mae, losses) = train_and_test(&train, &test, &cfg, Variant::Full)?;
    Ok((
        mae < 3.0 && losses.len() <= 80,
        format!(
            "test MAE {mae:.2} after {} epochs (final train L1 {:.2}), {:.1} min",
            losses.len(),
            losses.last().copied().unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64() / 60.0
        ),
    ))
}

fn ecg_truth() -> Check {
    let mut ok = true;
    let mut notes = Vec::new();
    for bpm in [60.0, 75.0, 150.0] {
        let hr = ecg_hr(&synth::synth_ecg(bpm, 256.0, 30.0, 3).map_err(err)?).map_err(err)?;
        ok &= (hr - bpm).abs() <= 1.0;
        notes.push(format!("{bpm} -> {hr:.2}"));
    }
    Ok((ok, notes.join(", ")))
}

fn metrics_oracle() -> Check {
    let m = metrics(&[70.0, 80.0], &[72.0, 78.0]).map_err(err)?;
    // errors are -2 and +2: |e| mean 2, rms 2, mean 0, sample std sqrt(8)
    let ok = (m.mae - 2.0).abs() <= 1e-9
        && (m.rmse - 2.0).abs() <= 1e-9
        && m.mean_err.abs() <= 1e-9
        && (m.std_err - 2.8284271247461903).abs() <= 1e-9;
    let id = metrics(&[61.0, 77.5, 93.0, 120.0], &[61.0, 77.5, 93.0, 120.0]).map_err(err)?;
    let ok = ok && (id.pearson_r - 1.0).abs() <= 1e-12 && id.mae == 0.0;
    Ok((ok, format!("{m:?}; identity r {}", id.pearson_r)))
}

fn cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rppg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("rppg {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = r#"{
        "benchmark": {"count": 3, "hr_range": [55, 95],
                      "scene": {"width": 80, "height": 64, "face_rx": 0.25, "fps": 10.0, "duration": 4.0,
                                "illum_amp": 0.03, "sensor_sigma": 1.0}},
        "train": {"epochs": 3, "clip_seconds": 2.0, "stride_seconds": 0.5, "batch_size": 4,
                  "encoder": {"d_model": 16, "d_ff": 32, "heads": 2, "layers": 2}}
    }"#;
    std::fs::write(dir.path().join("run.json"), config).map_err(err)?;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let data = format!("{name}/data");
        cli(&["synth", "--config", "run.json", "--seed", "17", "--out", &data], dir.path())?;
        let mut maps = Vec::new();
        for v in ["v000", "v001", "v002"] {
            let out = format!("{name}/{v}.mmop");
            cli(&["embed", "--video", &format!("{data}/{v}"), "--scales", "25,81,169", "--out", &out], dir.path())?;
            maps.push(std::fs::read(dir.path().join(&out)).map_err(err)?);
        }
        let model = format!("{name}/model.tppg");
        let log = cli(&["train", "--config", "run.json", "--seed", "17", "--data", &data, "--out", &model], dir.path())?;
        let losses: Vec<String> = log.lines().filter(|l| l.starts_with("epoch")).map(String::from).collect();
        let ckpt = std::fs::read(dir.path().join(&model)).map_err(err)?;
        runs.push((maps, losses, ckpt));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let ok = a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.1.len() == 3;
    Ok((
        ok,
        format!(
            "mmop identical {}, losses identical {} ({}), checkpoint identical {}",
            a.0 == b.0,
            a.1 == b.1,
            a.1.join(" | "),
            a.2 == b.2
        ),
    ))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let skip_bench = std::env::var("RPPG_SKIP_BENCH").is_ok_and(|v| v == "1");
    let criteria: [(usize, &str, fn() -> Check); 11] = [
        (1, "embedding tiling", tiling),
        (2, "shape law", shape_law),
        (3, "no-resize guarantee", no_resize),
        (4, "attention oracle", attention_oracle),
        (5, "gradient checks", gradient_checks),
        (6, "baseline recovery", baseline_recovery),
        (7, "two-stream advantage", two_stream_advantage),
        (8, "end-to-end learning", end_to_end),
        (9, "ecg ground truth", ecg_truth),
        (10, "metrics oracle", metrics_oracle),
        (11, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        if skip_bench && (id == 7 || id == 8) {
            println!("criterion {id:>2} {name}: SKIP (RPPG_SKIP_BENCH=1)");
            continue;
        }
        let t0 = Instant::now();
        let (passed, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!passed);
        println!(
            "criterion {id:>2} {name}: {} [{:.1} s] {detail}",
            if passed { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
