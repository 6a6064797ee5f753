//! Seeded synthetic recordings: a pulsing elliptical face over a static
//! textured background, both modulated by the same illumination curve.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{
    self, AnchorMap, Frame, FrameSequence, LandmarkFrame, LandmarkTrack, Point, ANCHORS_FILE, LANDMARKS_FILE,
    LANDMARK_COUNT,
};
use crate::signals::TimeSeries;

pub const HR_MIN_BPM: f64 = 45.0;
pub const HR_MAX_BPM: f64 = 180.0;
pub const CHANNEL_GAINS: [f64; 3] = [0.33, 1.0, 0.66];
pub const GT_FILE: &str = "gt.json";
pub const ECG_FILE: &str = "ecg.csv";
pub const ECG_FS: u32 = 256;

/// Anchor indices used by generated landmark tracks.
pub fn default_anchors() -> AnchorMap {
    AnchorMap {
        left_cheek_outer: 0,
        right_cheek_outer: 16,
        chin: 8,
        eyebrow_center: 40,
    }
}

/// Heart rate knots one second apart, linearly interpolated and held after the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HrTrajectory(Vec<f64>);

impl HrTrajectory {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::invalid("heart-rate trajectory is empty"));
        }
        if let Some(bad) = knots.iter().find(|v| !(HR_MIN_BPM..=HR_MAX_BPM).contains(*v)) {
            return Err(Error::invalid(format!(
                "heart rate {bad} bpm outside [{HR_MIN_BPM}, {HR_MAX_BPM}]"
            )));
        }
        Ok(HrTrajectory(knots))
    }

    pub fn constant(bpm: f64) -> Result<Self> {
        Self::new(vec![bpm])
    }

    pub fn knots(&self) -> &[f64] {
        &self.0
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = &self.0;
        let t = t.max(0.0);
        let i = t.floor() as usize;
        if i + 1 >= k.len() {
            return k[k.len() - 1];
        }
        let f = t - i as f64;
        k[i] * (1.0 - f) + k[i + 1] * f
    }
}

impl TryFrom<Vec<f64>> for HrTrajectory {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        HrTrajectory::new(v)
    }
}

impl From<HrTrajectory> for Vec<f64> {
    fn from(t: HrTrajectory) -> Self {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Flat,
    Checker,
    Stripes,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub duration: f64,
    pub seed: u64,
    pub hr_bpm: HrTrajectory,
    pub pulse_amp: f64,
    pub illum_amp: f64,
    pub illum_cutoff: f64,
    pub motion_amp: f64,
    pub motion_freq: f64,
    pub sensor_sigma: f64,
    pub skin_rgb: [f64; 3],
    pub bg_style: BackgroundStyle,
    /// Amplitude of a static multiplicative per-pixel texture on face and
    /// background; keeps quantization error from being identical across pixels.
    pub texture_jitter: f64,
    /// Ellipse semi-axes as fractions of frame width and height.
    pub face_rx: f64,
    pub face_ry: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 80,
            fps: 30.0,
            duration: 30.0,
            seed: 0,
            hr_bpm: HrTrajectory(vec![72.0]),
            pulse_amp: 0.03,
            illum_amp: 0.0,
            illum_cutoff: 0.3,
            motion_amp: 0.0,
            motion_freq: 0.2,
            sensor_sigma: 0.0,
            skin_rgb: [200.0, 150.0, 120.0],
            bg_style: BackgroundStyle::Checker,
            texture_jitter: 0.05,
            face_rx: 0.2,
            face_ry: 0.3,
        }
    }
}

/// Ellipse centre and semi-axes in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl SceneConfig {
    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }

    pub fn ellipse_at(&self, t: f64) -> Ellipse {
        Ellipse {
            cx: self.width as f64 / 2.0 + self.motion_amp * (2.0 * PI * self.motion_freq * t).sin(),
            cy: self.height as f64 / 2.0,
            rx: self.face_rx * self.width as f64,
            ry: self.face_ry * self.height as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.width < media_io::MIN_FRAME_SIDE || self.height < media_io::MIN_FRAME_SIDE {
            return bad(format!("frame {}x{} below 16x16", self.width, self.height));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || !(self.duration > 0.0) || self.frame_count() == 0 {
            return bad(format!("fps {} / duration {}", self.fps, self.duration));
        }
        if !(0.0..=0.1).contains(&self.pulse_amp) {
            return bad(format!("pulse_amp {} outside [0, 0.1]", self.pulse_amp));
        }
        if !(0.0..=0.5).contains(&self.illum_amp) {
            return bad(format!("illum_amp {} outside [0, 0.5]", self.illum_amp));
        }
        if !(self.illum_cutoff > 0.0 && self.illum_cutoff < 0.6) {
            return bad(format!("illum_cutoff {} must lie in (0, 0.6) Hz", self.illum_cutoff));
        }
        if self.motion_amp < 0.0 || self.motion_freq < 0.0 || self.sensor_sigma < 0.0 || self.texture_jitter < 0.0 {
            return bad("motion, noise and texture amplitudes must be non-negative".into());
        }
        if self.skin_rgb.iter().any(|c| !(0.0..=255.0).contains(c)) {
            return bad("skin_rgb channels must lie in [0, 255]".into());
        }
        HrTrajectory::new(self.hr_bpm.0.clone())?;
        // the face box spans 1.4 rx / 1.4 ry around the centre; strips add 0.4 rx per side
        let rx = self.face_rx * self.width as f64;
        let ry = self.face_ry * self.height as f64;
        if rx < 2.0 || ry < 2.0 {
            return bad("face ellipse too small".into());
        }
        let half_w = 1.4 * rx + self.motion_amp + 1.0;
        let w = self.width as f64;
        let h = self.height as f64;
        if w / 2.0 - half_w < 0.0 || w / 2.0 + half_w > w || h / 2.0 - 1.4 * ry < 0.0 || h / 2.0 + ry > h {
            return bad(format!(
                "face ellipse ({rx:.1} x {ry:.1} px) with margins and motion exceeds the {}x{} frame",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub hr_per_frame: Vec<f64>,
    pub bvp: Vec<f64>,
    pub illum: Vec<f64>,
}

/// `p = sin(phi) + 0.3 sin(2 phi)` with chirp-correct phase, scaled to `max |p| = 1`.
pub fn bvp_waveform(hr: &HrTrajectory, fps: f64, frame_count: usize, seed: u64) -> Result<Vec<f64>> {
    HrTrajectory::new(hr.0.clone())?;
    if !(fps > 0.0) {
        return Err(Error::invalid(format!("fps {fps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut phi = rng.random_range(0.0..2.0 * PI);
    let mut p = Vec::with_capacity(frame_count);
    for i in 0..frame_count {
        p.push(phi.sin() + 0.3 * (2.0 * phi).sin());
        phi += 2.0 * PI * hr.at(i as f64 / fps) / 60.0 / fps;
    }
    let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut p {
            *v /= peak;
        }
    }
    Ok(p)
}

/// Removes every Fourier component above `cutoff` Hz (after linear detrending
/// so the periodic extension has no jump).
fn brickwall_lowpass(x: &[f64], fs: f64, cutoff: f64) -> Vec<f64> {
    let n = x.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let slope = (x[n - 1] - x[0]) / (n - 1) as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, v)| Complex::new(v - x[0] - slope * i as f64, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f > cutoff {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// `1 + amp * w` with `w` a low-passed Gaussian walk scaled to `max |w| = 1`.
pub fn illumination(config: &SceneConfig) -> Vec<f64> {
    let n = config.frame_count();
    if config.illum_amp == 0.0 {
        return vec![1.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut walk = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += normal.sample(&mut rng);
        walk.push(acc);
    }
    let mut w = brickwall_lowpass(&walk, config.fps, config.illum_cutoff);
    let mean = w.iter().sum::<f64>() / n as f64;
    let peak = w.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    for v in &mut w {
        *v = if peak > 0.0 { (*v - mean) / peak } else { 0.0 };
    }
    w.iter().map(|v| 1.0 + config.illum_amp * v).collect()
}

fn background_texture(config: &SceneConfig) -> Vec<[f64; 3]> {
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let jitter = 1.0 + config.texture_jitter * rng.random_range(-1.0..1.0);
            let base: [f64; 3] = match config.bg_style {
                BackgroundStyle::Flat => [120.0, 120.0, 120.0],
                BackgroundStyle::Checker => {
                    if (x / 8 + y / 8) % 2 == 0 {
                        [90.0, 100.0, 110.0]
                    } else {
                        [150.0, 140.0, 130.0]
                    }
                }
                BackgroundStyle::Stripes => {
                    if (x / 4) % 2 == 0 {
                        [70.0, 130.0, 90.0]
                    } else {
                        [160.0, 110.0, 150.0]
                    }
                }
                BackgroundStyle::Noise => {
                    let v: f64 = rng.random_range(60.0..200.0);
                    [v, 0.9 * v + 10.0, 0.8 * v + 20.0]
                }
            };
            base.map(|c| c * jitter)
        })
        .collect()
}

/// 77 boundary points plus the four anchors at the ellipse extremes.
pub fn ellipse_landmarks(e: &Ellipse, anchors: &AnchorMap) -> LandmarkFrame {
    let mut pts = [Point::default(); LANDMARK_COUNT];
    let fixed = [
        (anchors.left_cheek_outer, Point::new(e.cx - e.rx, e.cy)),
        (anchors.right_cheek_outer, Point::new(e.cx + e.rx, e.cy)),
        (anchors.chin, Point::new(e.cx, e.cy + e.ry)),
        (anchors.eyebrow_center, Point::new(e.cx, e.cy - e.ry)),
    ];
    let others = LANDMARK_COUNT - fixed.len();
    let mut k = 0;
    for (i, p) in pts.iter_mut().enumerate() {
        if let Some((_, a)) = fixed.iter().find(|(idx, _)| *idx == i) {
            *p = *a;
        } else {
            let th = 2.0 * PI * (k as f64 + 0.5) / others as f64;
            *p = Point::new(e.cx + e.rx * th.cos(), e.cy + e.ry * th.sin());
            k += 1;
        }
    }
    pts
}

/// Renders frames, landmarks and per-frame ground truth.
pub fn render_scene(config: &SceneConfig) -> Result<(FrameSequence, LandmarkTrack, GroundTruth)> {
    config.validate()?;
    let n = config.frame_count();
    let (w, h) = (config.width, config.height);
    let bvp = bvp_waveform(&config.hr_bpm, config.fps, n, config.seed)?;
    let illum = illumination(config);
    let texture = background_texture(config);
    let mut skin_rng = ChaCha8Rng::seed_from_u64(config.seed);
    skin_rng.set_stream(4);
    // skin texture lives in face coordinates so it moves with the face
    let (skin_w, skin_h) = (2 * w, 2 * h);
    let skin: Vec<f64> = (0..skin_w * skin_h)
        .map(|_| 1.0 + config.texture_jitter * skin_rng.random_range(-1.0..1.0))
        .collect();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(5);
    let noise = Normal::new(0.0, config.sensor_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let anchors = default_anchors();
    let mut frames = Vec::with_capacity(n);
    let mut landmarks = Vec::with_capacity(n);
    let mut hr = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / config.fps;
        let e = config.ellipse_at(t);
        let l = illum[i];
        let face_gain: [f64; 3] = std::array::from_fn(|c| (1.0 + config.pulse_amp * CHANNEL_GAINS[c] * bvp[i]) * l);
        let mut pixels = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (dx, dy) = ((px - e.cx) / e.rx, (py - e.cy) / e.ry);
                let rgb: [f64; 3] = if dx * dx + dy * dy <= 1.0 {
                    let sx = ((px - e.cx).floor() as i64 + w as i64).clamp(0, skin_w as i64 - 1) as usize;
                    let sy = ((py - e.cy).floor() as i64 + h as i64).clamp(0, skin_h as i64 - 1) as usize;
                    let s = skin[sy * skin_w + sx];
                    std::array::from_fn(|c| config.skin_rgb[c] * s * face_gain[c])
                } else {
                    let tex = texture[y * w + x];
                    std::array::from_fn(|c| tex[c] * l)
                };
                for v in rgb {
                    let v = if config.sensor_sigma > 0.0 { v + noise.sample(&mut noise_rng) } else { v };
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        frames.push(Frame::new(w, h, pixels)?);
        landmarks.push(ellipse_landmarks(&e, &anchors));
        hr.push(config.hr_bpm.at(t));
    }
    Ok((
        FrameSequence::new(frames, config.fps)?,
        LandmarkTrack::new(landmarks, anchors)?,
        GroundTruth {
            hr_per_frame: hr,
            bvp,
            illum,
        },
    ))
}

/// ECG with Gaussian R waves (sigma 10 ms) and +/-2% beat-to-beat jitter.
pub fn synth_ecg_trajectory(hr: &HrTrajectory, sample_rate: f64, duration: f64, seed: u64) -> Result<TimeSeries> {
    let n = (duration * sample_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6);
    let base = Normal::new(0.0, 0.01).unwrap();
    let mut x: Vec<f64> = (0..n).map(|_| base.sample(&mut rng)).collect();
    let sigma = 0.010;
    let reach = (4.0 * sigma * sample_rate).ceil() as i64;
    let rr = |t: f64, rng: &mut ChaCha8Rng| 60.0 / hr.at(t) * (1.0 + rng.random_range(-0.02..0.02));
    let mut t = 0.5 * rr(0.0, &mut rng);
    while t < duration {
        let centre = (t * sample_rate).round() as i64;
        for j in (centre - reach).max(0)..(centre + reach + 1).min(n as i64) {
            let dt = j as f64 / sample_rate - t;
            x[j as usize] += (-0.5 * (dt / sigma).powi(2)).exp();
        }
        t += rr(t, &mut rng);
    }
    TimeSeries::new(x, sample_rate)
}

pub fn synth_ecg(hr_bpm: f64, sample_rate: f64, duration: f64, seed: u64) -> Result<TimeSeries> {
    synth_ecg_trajectory(&HrTrajectory::constant(hr_bpm)?, sample_rate, duration, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRef {
    pub path: String,
    pub fs: u32,
}

/// Contents of `gt.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_per_frame: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecg: Option<EcgRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bvp: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illum: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SceneConfig>,
}

impl GtFile {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        media_io::read_json(&dir.as_ref().join(GT_FILE))
    }
}

/// Renders a scene and writes frames, landmarks, anchors, ECG and `gt.json` into `dir`.
pub fn write_scene(config: &SceneConfig, dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let (seq, track, gt) = render_scene(config)?;
    media_io::write_frame_sequence(&seq, dir)?;
    track.save(dir.join(LANDMARKS_FILE))?;
    track.anchors().save(dir.join(ANCHORS_FILE))?;
    let ecg = synth_ecg_trajectory(&config.hr_bpm, ECG_FS as f64, config.duration, config.seed)?;
    ecg.save_csv(dir.join(ECG_FILE))?;
    let file = GtFile {
        hr_per_frame: Some(gt.hr_per_frame.clone()),
        ecg: Some(EcgRef {
            path: ECG_FILE.into(),
            fs: ECG_FS,
        }),
        bvp: Some(gt.bvp.clone()),
        illum: Some(gt.illum.clone()),
        config: Some(config.clone()),
    };
    media_io::write_json(&dir.join(GT_FILE), &file)?;
    Ok(gt)
}

/// A family of scenes sharing one template and differing in seed and constant heart rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub count: usize,
    /// Constant heart rate of each video, drawn uniformly from this range.
    pub hr_range: [f64; 2],
    pub scene: SceneConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            count: 10,
            hr_range: [50.0, 110.0],
            scene: SceneConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.hr_range;
        if !(HR_MIN_BPM <= lo && lo <= hi && hi <= HR_MAX_BPM) {
            return Err(Error::invalid(format!(
                "hr_range [{lo}, {hi}] must lie within [{HR_MIN_BPM}, {HR_MAX_BPM}]"
            )));
        }
        self.scene.validate()
    }

    /// Scene `i`; its seed and heart rate depend only on `scene.seed` and `i`.
    pub fn scene_for(&self, i: usize) -> Result<SceneConfig> {
        let seed = self.scene.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_4a7e);
        let [lo, hi] = self.hr_range;
        let hr = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ok(SceneConfig {
            seed,
            hr_bpm: HrTrajectory::constant(hr)?,
            ..self.scene.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi;
    use crate::signals::{band_power, ecg_hr, magnitude_spectrum, pearson, spectral_hr};

    fn quick(seconds: f64) -> SceneConfig {
        SceneConfig {
            duration: seconds,
            ..SceneConfig::default()
        }
    }

    fn channel_trace(seq: &FrameSequence, track: &LandmarkTrack, c: usize, face: bool) -> Vec<f64> {
        seq.frames()
            .iter()
            .zip(track.frames())
            .map(|(f, lm)| {
                let (fr, br) = roi::frame_regions(f, lm, track.anchors()).unwrap();
                if face { fr.mean_rgb()[c] } else { br.mean_rgb()[c] }
            })
            .collect()
    }

    #[test]
    fn waveform_peak_and_normalization() {
        let p = bvp_waveform(&HrTrajectory::constant(72.0).unwrap(), 30.0, 900, 3).unwrap();
        let peak = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        let ts = TimeSeries::new(p, 30.0).unwrap();
        let (df, mags) = magnitude_spectrum(&ts);
        let k = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((k as f64 * df * 60.0 - 72.0).abs() <= 0.5);
        assert!((spectral_hr(&ts).unwrap() - 72.0).abs() < 0.5);
    }

    #[test]
    fn chirp_phase_follows_trajectory() {
        let hr = HrTrajectory::new(vec![60.0, 60.0, 120.0]).unwrap();
        assert_eq!(hr.at(1.5), 90.0);
        assert_eq!(hr.at(10.0), 120.0);
        let p = bvp_waveform(&hr, 50.0, 50 * 40, 0).unwrap();
        let tail = TimeSeries::new(p[50 * 10..].to_vec(), 50.0).unwrap();
        assert!((spectral_hr(&tail).unwrap() - 120.0).abs() < 0.5);
        assert!(HrTrajectory::new(vec![72.0, 200.0]).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SceneConfig {
            sensor_sigma: 2.0,
            illum_amp: 0.05,
            motion_amp: 2.0,
            ..quick(2.0)
        };
        let (a, la, _) = render_scene(&cfg).unwrap();
        let (b, lb, _) = render_scene(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let other = SceneConfig { seed: 1, ..cfg };
        assert_ne!(render_scene(&other).unwrap().0, a);
    }

    #[test]
    fn no_pulse_no_spectral_peak() {
        let ratio = |pulse: f64| {
            let cfg = SceneConfig {
                pulse_amp: pulse,
                sensor_sigma: 2.0,
                ..quick(20.0)
            };
            let (seq, track, _) = render_scene(&cfg).unwrap();
            let ts = TimeSeries::new(channel_trace(&seq, &track, 1, true), cfg.fps).unwrap();
            let (df, mags) = magnitude_spectrum(&ts);
            let band: Vec<f64> = mags
                .iter()
                .enumerate()
                .filter(|(k, _)| (0.7..=4.0).contains(&(*k as f64 * df)))
                .map(|(_, m)| m * m)
                .collect();
            let mut sorted = band.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[sorted.len() - 1] / sorted[sorted.len() / 2]
        };
        let (none, some) = (ratio(0.0), ratio(0.02));
        assert!(none < 20.0, "{none}");
        assert!(some > 1000.0, "{some}");
    }

    #[test]
    fn background_tracks_illumination() {
        let cfg = SceneConfig {
            pulse_amp: 0.0,
            illum_amp: 0.05,
            ..quick(20.0)
        };
        let (seq, track, gt) = render_scene(&cfg).unwrap();
        let bg = channel_trace(&seq, &track, 1, false);
        assert!(pearson(&bg, &gt.illum).unwrap() > 0.99);
        let ts = TimeSeries::new(gt.illum.clone(), cfg.fps).unwrap();
        assert!(band_power(&ts, 0.7, 15.0) < 1e-4 * band_power(&ts, 0.0, 0.6));
    }

    #[test]
    fn face_over_background_recovers_pulse() {
        let cfg = SceneConfig {
            illum_amp: 0.1,
            ..quick(10.0)
        };
        let (seq, track, gt) = render_scene(&cfg).unwrap();
        for c in 0..3 {
            let face = channel_trace(&seq, &track, c, true);
            let back = channel_trace(&seq, &track, c, false);
            let ratio: Vec<f64> = face.iter().zip(&back).map(|(f, b)| f / b).collect();
            let model: Vec<f64> = gt.bvp.iter().map(|p| 1.0 + cfg.pulse_amp * CHANNEL_GAINS[c] * p).collect();
            let r = pearson(&ratio, &model).unwrap();
            assert!(r > 0.999, "channel {c}: r = {r}");
        }
    }

    #[test]
    fn landmarks_move_rigidly() {
        let cfg = SceneConfig {
            motion_amp: 4.0,
            motion_freq: 0.5,
            ..quick(2.0)
        };
        let (_, track, _) = render_scene(&cfg).unwrap();
        let a = track.anchors();
        let boxes: Vec<_> = track.frames().iter().map(|lm| roi::face_bbox(lm, a).unwrap()).collect();
        let area0 = boxes[0].width() * boxes[0].height();
        for (lm, b) in track.frames().iter().zip(&boxes) {
            assert!((b.width() * b.height() - area0).abs() < 1e-9);
            let dx = lm[0].x - track.frames()[0][0].x;
            for (p, q) in lm.iter().zip(&track.frames()[0]) {
                assert!((p.x - q.x - dx).abs() < 1e-9 && (p.y - q.y).abs() < 1e-9);
            }
        }
        let lm = &track.frames()[0];
        assert!(lm[a.left_cheek_outer].x < lm[a.right_cheek_outer].x);
        assert!(lm[a.eyebrow_center].y < lm[a.chin].y);
    }

    #[test]
    fn oversize_face_rejected() {
        let cfg = SceneConfig {
            face_rx: 0.4,
            ..quick(1.0)
        };
        assert!(render_scene(&cfg).is_err());
        let cfg = SceneConfig {
            pulse_amp: 0.2,
            ..quick(1.0)
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig {
            illum_cutoff: 0.8,
            ..quick(1.0)
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ecg_peak_counts_and_rates() {
        let ecg = synth_ecg(75.0, 256.0, 30.0, 4).unwrap();
        let peaks = crate::signals::detect_r_peaks(&ecg);
        assert!(peaks.len() == 37 || peaks.len() == 38, "{}", peaks.len());
        for hr in [60.0, 75.0, 150.0] {
            let ecg = synth_ecg(hr, 256.0, 30.0, 9).unwrap();
            assert!((ecg_hr(&ecg).unwrap() - hr).abs() < 1.0);
        }
        assert_eq!(synth_ecg(75.0, 256.0, 5.0, 1).unwrap(), synth_ecg(75.0, 256.0, 5.0, 1).unwrap());
    }

    #[test]
    fn ecg_peaks_dominate_baseline() {
        let ecg = synth_ecg(60.0, 256.0, 10.0, 2).unwrap();
        let peaks = crate::signals::detect_r_peaks(&ecg);
        // samples far from any R wave form the baseline
        let quiet: Vec<f64> = (0..ecg.len())
            .filter(|i| peaks.iter().all(|p| (*p as i64 - *i as i64).abs() > 20))
            .map(|i| ecg.samples[i])
            .collect();
        let m = quiet.iter().sum::<f64>() / quiet.len() as f64;
        let sd = (quiet.iter().map(|v| (v - m).powi(2)).sum::<f64>() / quiet.len() as f64).sqrt();
        for p in peaks {
            assert!(ecg.samples[p] - m >= 10.0 * sd);
        }
    }

    #[test]
    fn scene_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(1.0);
        write_scene(&cfg, dir.path()).unwrap();
        let seq = media_io::load_frame_sequence(dir.path()).unwrap();
        assert_eq!(seq.len(), 30);
        let gt = GtFile::load(dir.path()).unwrap();
        assert_eq!(gt.hr_per_frame.unwrap().len(), 30);
        assert_eq!(gt.config.unwrap(), cfg);
        let anchors = AnchorMap::load(dir.path().join(ANCHORS_FILE)).unwrap();
        assert_eq!(anchors, default_anchors());
        let track = media_io::load_landmarks(dir.path().join(LANDMARKS_FILE), anchors).unwrap();
        assert_eq!(track.len(), 30);
    }
}
