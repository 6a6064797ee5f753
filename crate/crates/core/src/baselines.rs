//! Classical pulse extractors (GREEN, CHROM, POS) over face-region colour means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{AnchorMap, FrameSequence, LandmarkTrack};
use crate::roi;
use crate::signals::{bandpass_hr_band, detrend_moving_mean, spectral_hr, TimeSeries};

pub const GREEN_DETREND_S: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Green,
    Chrom,
    Pos,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "green" => Ok(Method::Green),
            "chrom" => Ok(Method::Chrom),
            "pos" => Ok(Method::Pos),
            other => Err(Error::invalid(format!("unknown method {other}; use green, chrom or pos"))),
        }
    }
}

/// Per-frame mean (R, G, B) of the face box.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTrace {
    pub rgb: Vec<[f64; 3]>,
    pub fps: f64,
}

impl RgbTrace {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rgb.iter().map(|v| v[c]).collect()
    }

    /// Each channel divided by its temporal mean.
    pub fn normalized(&self) -> Result<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = Default::default();
        for (c, o) in out.iter_mut().enumerate() {
            let ch = self.channel(c);
            let mean = ch.iter().sum::<f64>() / ch.len().max(1) as f64;
            if !(mean.abs() > 0.0) {
                return Err(Error::invalid(format!("channel {c} has zero temporal mean")));
            }
            *o = ch.iter().map(|v| v / mean).collect();
        }
        Ok(out)
    }
}

pub fn rgb_trace(frames: &FrameSequence, landmarks: &LandmarkTrack, anchors: &AnchorMap) -> Result<RgbTrace> {
    if frames.len() != landmarks.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} landmark rows",
            frames.len(),
            landmarks.len()
        )));
    }
    let track = landmarks.clone().clamped(frames.width(), frames.height());
    let rgb = frames
        .frames()
        .iter()
        .zip(track.frames())
        .map(|(f, lm)| {
            let b = roi::face_bbox(lm, anchors)?;
            Ok(roi::crop(f, &b)?.mean_rgb())
        })
        .collect::<Result<_>>()?;
    Ok(RgbTrace { rgb, fps: frames.fps() })
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 { num / den } else { 0.0 }
}

pub fn green_hr(trace: &RgbTrace) -> Result<f64> {
    let g = TimeSeries::new(trace.channel(1), trace.fps)?;
    let d = detrend_moving_mean(&g, GREEN_DETREND_S)?;
    spectral_hr(&bandpass_hr_band(&d)?)
}

/// `S = X - (sd X / sd Y) Y` with `X = 3Rn - 2Gn`, `Y = 1.5Rn + Gn - 1.5Bn`.
pub fn chrom_signal(trace: &RgbTrace) -> Result<TimeSeries> {
    let [r, g, b] = trace.normalized()?;
    let x: Vec<f64> = r.iter().zip(&g).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
    let y: Vec<f64> = (0..r.len()).map(|i| 1.5 * r[i] + g[i] - 1.5 * b[i]).collect();
    let alpha = ratio_or_zero(std_dev(&x), std_dev(&y));
    TimeSeries::new(x.iter().zip(&y).map(|(x, y)| x - alpha * y).collect(), trace.fps)
}

pub fn chrom_hr(trace: &RgbTrace) -> Result<f64> {
    spectral_hr(&bandpass_hr_band(&chrom_signal(trace)?)?)
}

/// `h = S1 + (sd S1 / sd S2) S2` with `S1 = Gn - Bn`, `S2 = Gn + Bn - 2Rn`, one full-length window.
pub fn pos_signal(trace: &RgbTrace) -> Result<TimeSeries> {
    let [r, g, b] = trace.normalized()?;
    let s1: Vec<f64> = g.iter().zip(&b).map(|(g, b)| g - b).collect();
    let s2: Vec<f64> = (0..r.len()).map(|i| g[i] + b[i] - 2.0 * r[i]).collect();
    let alpha = ratio_or_zero(std_dev(&s1), std_dev(&s2));
    TimeSeries::new(s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect(), trace.fps)
}

pub fn pos_hr(trace: &RgbTrace) -> Result<f64> {
    spectral_hr(&bandpass_hr_band(&pos_signal(trace)?)?)
}

pub fn estimate(method: Method, trace: &RgbTrace) -> Result<f64> {
    match method {
        Method::Green => green_hr(trace),
        Method::Chrom => chrom_hr(trace),
        Method::Pos => pos_hr(trace),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{band_power, magnitude_spectrum, pearson};
    use crate::synth::{render_scene, SceneConfig};
    use proptest::prelude::*;

    fn scene(cfg: &SceneConfig) -> (RgbTrace, Vec<f64>) {
        let (seq, track, gt) = render_scene(cfg).unwrap();
        (rgb_trace(&seq, &track, track.anchors()).unwrap(), gt.bvp)
    }

    fn clean() -> SceneConfig {
        SceneConfig::default()
    }

    fn synthetic(rgb_of: impl Fn(f64) -> [f64; 3], n: usize, fps: f64) -> RgbTrace {
        RgbTrace {
            rgb: (0..n).map(|i| rgb_of(i as f64 / fps)).collect(),
            fps,
        }
    }

    #[test]
    fn clean_scene_all_methods_recover_72() {
        let (trace, bvp) = scene(&clean());
        assert_eq!(trace.len(), 900);
        assert!(pearson(&trace.channel(1), &bvp).unwrap().abs() > 0.8);
        let est: Vec<f64> = [Method::Green, Method::Chrom, Method::Pos]
            .iter()
            .map(|m| estimate(*m, &trace).unwrap())
            .collect();
        for e in &est {
            assert!((e - 72.0).abs() < 2.0, "{est:?}");
        }
        let spread = est.iter().cloned().fold(f64::MIN, f64::max) - est.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1.0, "{est:?}");
    }

    #[test]
    fn constant_trace_errors() {
        let t = synthetic(|_| [100.0, 100.0, 100.0], 300, 30.0);
        assert_eq!(t.channel(0), vec![100.0; 300]);
        assert!(green_hr(&t).is_err());
        let zero = synthetic(|_| [0.0, 10.0, 10.0], 300, 30.0);
        assert!(chrom_hr(&zero).is_err());
    }

    #[test]
    fn chrom_cancels_illumination() {
        let cfg = SceneConfig {
            pulse_amp: 0.0,
            illum_amp: 0.05,
            ..clean()
        };
        let (trace, _) = scene(&cfg);
        let s = chrom_signal(&trace).unwrap();
        let gn = TimeSeries::new(trace.normalized().unwrap()[1].clone(), trace.fps).unwrap();
        let band = (0.0, cfg.illum_cutoff);
        assert!(band_power(&s, band.0, band.1) < 0.1 * band_power(&gn, band.0, band.1));
    }

    #[test]
    fn pos_flat_under_pure_illumination() {
        let cfg = SceneConfig {
            pulse_amp: 0.0,
            illum_amp: 0.05,
            sensor_sigma: 1.0,
            ..clean()
        };
        let (trace, _) = scene(&cfg);
        let h = pos_signal(&trace).unwrap();
        let (df, mags) = magnitude_spectrum(&h);
        let band: Vec<f64> = mags
            .iter()
            .enumerate()
            .filter(|(k, _)| (0.7..=4.0).contains(&(*k as f64 * df)))
            .map(|(_, m)| *m)
            .collect();
        let mut sorted = band.clone();
        sorted.sort_by(f64::total_cmp);
        let floor = sorted[sorted.len() / 2];
        assert!(band.iter().all(|m| *m <= 3.0 * floor.max(1e-12) || *m < 1e-9));
    }

    #[test]
    fn no_pulse_estimates_uncorrelated_with_label() {
        let mut est = Vec::new();
        let mut labels = Vec::new();
        for s in 0..20u64 {
            let hr = 50.0 + 5.0 * s as f64;
            let cfg = SceneConfig {
                seed: s,
                duration: 12.0,
                hr_bpm: crate::synth::HrTrajectory::constant(hr).unwrap(),
                pulse_amp: 0.0,
                sensor_sigma: 2.0,
                ..clean()
            };
            let (trace, _) = scene(&cfg);
            est.push(green_hr(&trace).unwrap());
            labels.push(hr);
        }
        assert!(pearson(&est, &labels).unwrap().abs() < 0.5);
    }

    #[test]
    fn channel_scaling_leaves_chrom_signal() {
        let (trace, _) = scene(&SceneConfig { duration: 8.0, ..clean() });
        let mut scaled = trace.clone();
        for v in &mut scaled.rgb {
            v[0] *= 1.7;
        }
        let a = chrom_signal(&trace).unwrap();
        let b = chrom_signal(&scaled).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pos_depends_on_channel_order() {
        let t = synthetic(
            |t| {
                let p = (2.0 * std::f64::consts::PI * 1.2 * t).sin();
                let q = (2.0 * std::f64::consts::PI * 2.1 * t).sin();
                [150.0 * (1.0 + 0.01 * q), 120.0 * (1.0 + 0.005 * p), 100.0 * (1.0 + 0.02 * q)]
            },
            600,
            30.0,
        );
        let swapped = RgbTrace {
            rgb: t.rgb.iter().map(|v| [v[2], v[1], v[0]]).collect(),
            fps: t.fps,
        };
        assert!((pos_hr(&t).unwrap() - pos_hr(&swapped).unwrap()).abs() > 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn estimators_ignore_global_scale(alpha in 0.2f64..5.0, f in 0.9f64..3.0) {
            let t = synthetic(
                |t| {
                    let p = (2.0 * std::f64::consts::PI * f * t).sin();
                    [150.0 + 0.3 * p, 120.0 + p, 100.0 + 0.6 * p + 0.2 * (3.0 * t).sin()]
                },
                450,
                30.0,
            );
            let scaled = RgbTrace { rgb: t.rgb.iter().map(|v| v.map(|c| c * alpha)).collect(), fps: t.fps };
            for m in [Method::Green, Method::Chrom, Method::Pos] {
                let a = estimate(m, &t).unwrap();
                let b = estimate(m, &scaled).unwrap();
                prop_assert!((a - b).abs() < 1e-6, "{:?}: {} vs {}", m, a, b);
            }
        }
    }
}
