//! Time-series utilities: filtering, spectral and ECG heart-rate estimation,
//! and error metrics over per-video predictions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HR_BAND_HZ: (f64, f64) = (0.7, 4.0);

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl TimeSeries {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::invalid(format!("sample rate {fs}")));
        }
        if samples.len() < 2 {
            return Err(Error::invalid("a time series needs at least 2 samples"));
        }
        Ok(TimeSeries { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Samples in `[t0, t1)` seconds.
    pub fn window(&self, t0: f64, t1: f64) -> Result<TimeSeries> {
        let a = ((t0 * self.fs).round().max(0.0) as usize).min(self.samples.len());
        let b = ((t1 * self.fs).round().max(0.0) as usize).min(self.samples.len());
        TimeSeries::new(self.samples[a..b.max(a)].to_vec(), self.fs)
    }

    /// Writes the two-column `t,mv` CSV.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("t,mv\n");
        for (i, v) in self.samples.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i as f64 / self.fs, v);
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, fs_hz: f64) -> Result<TimeSeries> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,mv" => {}
            _ => return Err(Error::format("ecg csv", "header must be \"t,mv\"")),
        }
        let samples = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::format("ecg csv", format!("row {i} is malformed")))
            })
            .collect::<Result<Vec<_>>>()?;
        TimeSeries::new(samples, fs_hz)
    }
}

/// Second-order section in transposed direct form II.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Steady-state delay registers for a constant input `x`.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        let z2 = self.b[2] * x - self.a[1] * y;
        let z1 = y - self.b[0] * x;
        [z1, z2]
    }

    fn run(&self, data: &mut [f64], mut z: [f64; 2]) {
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b[0] * x + z[0];
            z[0] = self.b[1] * x - self.a[0] * y + z[1];
            z[1] = self.b[2] * x - self.a[1] * y;
            *v = y;
        }
    }
}

type C64 = Complex<f64>;

/// Band-pass Butterworth from an order-2 low-pass prototype (two sections),
/// bilinear transform with pre-warped edges, unit gain at the band centre.
fn butterworth_bandpass(lo: f64, hi: f64, fs: f64) -> [Biquad; 2] {
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(lo), warp(hi));
    let bw = wh - wl;
    let w0sq = wl * wh;
    let k = 2.0 * fs;
    let mut sections = [Biquad { b: [0.0; 3], a: [0.0; 2] }; 2];
    // order-2 prototype poles: exp(i*3pi/4), exp(i*5pi/4); one of each conjugate pair suffices
    let proto = C64::from_polar(1.0, 3.0 * PI / 4.0);
    let half = proto * (bw / 2.0);
    let disc = (half * half - C64::new(w0sq, 0.0)).sqrt();
    let analog = [half + disc, half - disc];
    for (sec, &p) in sections.iter_mut().zip(&analog) {
        let zp = (C64::new(k, 0.0) + p) / (C64::new(k, 0.0) - p);
        // conjugate pair in z; zeros at z = 1 and z = -1
        sec.a = [-2.0 * zp.re, zp.norm_sqr()];
        sec.b = [1.0, 0.0, -1.0];
    }
    let center = 2.0 * (wl * wh).sqrt().atan2(2.0 * fs);
    let z = C64::from_polar(1.0, center);
    let mut gain = C64::new(1.0, 0.0);
    for s in &sections {
        let num = C64::new(s.b[0], 0.0) + C64::new(s.b[1], 0.0) / z + C64::new(s.b[2], 0.0) / (z * z);
        let den = C64::new(1.0, 0.0) + C64::new(s.a[0], 0.0) / z + C64::new(s.a[1], 0.0) / (z * z);
        gain *= num / den;
    }
    let g = 1.0 / gain.norm().sqrt();
    for s in &mut sections {
        for b in &mut s.b {
            *b *= g;
        }
    }
    sections
}

fn sos_filter(sections: &[Biquad], data: &mut [f64]) {
    let mut x0 = data[0];
    for s in sections {
        let z = s.steady_state(x0);
        s.run(data, z);
        x0 *= s.dc_gain();
    }
}

/// Zero-phase (forward-backward) Butterworth band-pass with odd-reflection padding.
pub fn bandpass(series: &TimeSeries, lo_hz: f64, hi_hz: f64) -> Result<TimeSeries> {
    let nyq = series.fs / 2.0;
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < nyq) {
        return Err(Error::invalid(format!(
            "band [{lo_hz}, {hi_hz}] Hz invalid for fs {}",
            series.fs
        )));
    }
    let sections = butterworth_bandpass(lo_hz, hi_hz, series.fs);
    let x = &series.samples;
    let n = x.len();
    let pad = (3.0 * series.fs / lo_hz).round().max(15.0) as usize;
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    sos_filter(&sections, &mut ext);
    ext.reverse();
    sos_filter(&sections, &mut ext);
    ext.reverse();
    TimeSeries::new(ext[pad..pad + n].to_vec(), series.fs)
}

pub fn bandpass_hr_band(series: &TimeSeries) -> Result<TimeSeries> {
    bandpass(series, HR_BAND_HZ.0, HR_BAND_HZ.1)
}

/// Subtracts a centred moving mean of `window_s` seconds.
pub fn detrend_moving_mean(series: &TimeSeries, window_s: f64) -> Result<TimeSeries> {
    let n = series.len();
    let half = ((window_s * series.fs / 2.0).round() as usize).max(1);
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in series.samples.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let out = (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            series.samples[i] - (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect();
    TimeSeries::new(out, series.fs)
}

/// Magnitude spectrum of the mean-removed, Hann-windowed series zero-padded to
/// at least 8x its length. Returns `(bin spacing in Hz, magnitudes)`.
pub fn magnitude_spectrum(series: &TimeSeries) -> (f64, Vec<f64>) {
    let n = series.len();
    let nfft = (8 * n).next_power_of_two();
    let mean = series.samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<C64> = series
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            C64::new((v - mean) * w, 0.0)
        })
        .collect();
    buf.resize(nfft, C64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let mags = buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect();
    (series.fs / nfft as f64, mags)
}

/// Spectral power (squared magnitude, summed) between `lo` and `hi` Hz.
pub fn band_power(series: &TimeSeries, lo: f64, hi: f64) -> f64 {
    let (df, mags) = magnitude_spectrum(series);
    mags.iter()
        .enumerate()
        .filter(|(i, _)| {
            let f = *i as f64 * df;
            f >= lo && f <= hi
        })
        .map(|(_, m)| m * m)
        .sum()
}

/// Dominant frequency in the heart-rate band, in beats per minute.
pub fn spectral_hr(series: &TimeSeries) -> Result<f64> {
    if (series.len() as f64) < 4.0 * series.fs {
        return Err(Error::invalid(format!(
            "{} samples at {} Hz is shorter than 4 s",
            series.len(),
            series.fs
        )));
    }
    let (df, mags) = magnitude_spectrum(series);
    let lo = (HR_BAND_HZ.0 / df).ceil() as usize;
    let hi = ((HR_BAND_HZ.1 / df).floor() as usize).min(mags.len() - 2);
    let (k, &peak) = mags[lo..=hi]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, m)| (i + lo, m))
        .ok_or_else(|| Error::invalid("empty heart-rate band"))?;
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Numeric("no spectral energy in the heart-rate band".into()));
    }
    let (a, b, c) = (mags[k - 1], mags[k], mags[k + 1]);
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    Ok(60.0 * (k as f64 + delta.clamp(-0.5, 0.5)) * df)
}

pub const ECG_THRESHOLD_STD: f64 = 2.5;
pub const ECG_REFRACTORY_S: f64 = 0.33;

/// R-peak sample indices: local maxima above `mean + 2.5 std`, at least
/// 0.33 s apart (the larger peak wins inside the refractory window).
pub fn detect_r_peaks(series: &TimeSeries) -> Vec<usize> {
    let x = &series.samples;
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let thr = mean + ECG_THRESHOLD_STD * std;
    let refractory = (ECG_REFRACTORY_S * series.fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..x.len().saturating_sub(1) {
        if !(x[i] > thr && x[i] >= x[i - 1] && x[i] > x[i + 1]) {
            continue;
        }
        match peaks.last_mut() {
            Some(last) if i - *last < refractory => {
                if x[i] > x[*last] {
                    *last = i;
                }
            }
            _ => peaks.push(i),
        }
    }
    peaks
}

/// Heart rate from mean RR interval of detected R peaks.
pub fn ecg_hr(series: &TimeSeries) -> Result<f64> {
    let peaks = detect_r_peaks(series);
    if peaks.len() < 2 {
        return Err(Error::invalid(format!("found {} R peaks, need 2", peaks.len())));
    }
    let mean_rr = (peaks[peaks.len() - 1] - peaks[0]) as f64 / (peaks.len() - 1) as f64 / series.fs;
    Ok(60.0 / mean_rr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    #[serde(rename = "mean")]
    pub mean_err: f64,
    #[serde(rename = "std")]
    pub std_err: f64,
    #[serde(rename = "r")]
    pub pearson_r: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("correlation needs two equal series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation undefined for a constant series"));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn metrics(predicted: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth values",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(Error::invalid("metrics need at least 2 pairs"));
    }
    let n = predicted.len() as f64;
    let err: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| p - t).collect();
    let mean_err = err.iter().sum::<f64>() / n;
    let std_err = (err.iter().map(|e| (e - mean_err).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mae = err.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let pearson_r = pearson(predicted, truth)?;
    Ok(MetricsReport {
        mae,
        rmse,
        mean_err,
        std_err,
        pearson_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, amp: f64, fs: f64, secs: f64) -> Vec<f64> {
        (0..(fs * secs) as usize)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    fn amplitude_mid(x: &[f64]) -> f64 {
        // ignore the outer fifth on each side
        let a = x.len() / 5;
        x[a..x.len() - a].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Frequency response of the cascade evaluated directly on the unit circle.
    fn response(sections: &[Biquad], f: f64, fs: f64) -> f64 {
        let z = C64::from_polar(1.0, 2.0 * PI * f / fs);
        sections
            .iter()
            .map(|s| {
                let num = s.b[0] + s.b[1] / z + s.b[2] / (z * z);
                let den = 1.0 + s.a[0] / z + s.a[1] / (z * z);
                (num / den).norm()
            })
            .product()
    }

    #[test]
    fn bandpass_design_matches_butterworth_magnitude() {
        // analog oracle: |H|^2 = 1 / (1 + ((w^2 - w0^2) / (w bw))^4) on pre-warped axis
        let fs = 30.0;
        let s = butterworth_bandpass(0.7, 4.0, fs);
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (wl, wh) = (warp(0.7), warp(4.0));
        for f in [0.3, 0.7, 1.2, 2.0, 4.0, 6.0, 10.0] {
            let w = warp(f);
            let q = (w * w - wl * wh) / (w * (wh - wl));
            let oracle = 1.0 / (1.0 + q.powi(4)).sqrt();
            assert!((response(&s, f, fs) - oracle).abs() < 1e-9, "f={f}");
        }
    }

    #[test]
    fn passband_and_stopband() {
        let fs = 30.0;
        let pass = bandpass_hr_band(&TimeSeries::new(sine(1.2, 1.0, fs, 30.0), fs).unwrap()).unwrap();
        assert!(amplitude_mid(&pass.samples) >= 0.9);
        let stop = bandpass_hr_band(&TimeSeries::new(sine(6.0, 1.0, fs, 30.0), fs).unwrap()).unwrap();
        assert!(amplitude_mid(&stop.samples) < 0.2);
        let dc = bandpass_hr_band(&TimeSeries::new(vec![5.0; 900], fs).unwrap()).unwrap();
        let mean = dc.samples.iter().sum::<f64>() / 900.0;
        assert!(mean.abs() < 0.05);
        assert!(dc.samples.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn invalid_band() {
        let s = TimeSeries::new(vec![0.0; 100], 8.0).unwrap();
        assert!(bandpass(&s, 0.7, 4.0).is_err());
        assert!(bandpass(&s, 2.0, 1.0).is_err());
        assert!(bandpass(&s, 0.0, 1.0).is_err());
    }

    #[test]
    fn spectral_peaks() {
        let fs = 30.0;
        let hr = spectral_hr(&TimeSeries::new(sine(1.2, 1.0, fs, 30.0), fs).unwrap()).unwrap();
        assert!((hr - 72.0).abs() <= 0.5, "{hr}");
        let two: Vec<f64> = sine(1.2, 1.0, fs, 30.0)
            .iter()
            .zip(sine(2.0, 0.5, fs, 30.0))
            .map(|(a, b)| a + b)
            .collect();
        let hr = spectral_hr(&TimeSeries::new(two, fs).unwrap()).unwrap();
        assert!((hr - 72.0).abs() <= 0.5, "{hr}");
        assert!(spectral_hr(&TimeSeries::new(sine(1.2, 1.0, fs, 3.0), fs).unwrap()).is_err());
        assert!(spectral_hr(&TimeSeries::new(vec![1.0; 300], fs).unwrap()).is_err());
    }

    #[test]
    fn short_clip_interpolation_beats_bin_resolution() {
        let fs = 30.0;
        for f in [0.93, 1.27, 1.55, 2.41] {
            let hr = spectral_hr(&TimeSeries::new(sine(f, 1.0, fs, 10.0), fs).unwrap()).unwrap();
            assert!((hr - 60.0 * f).abs() < 2.0, "{f}: {hr}");
        }
    }

    #[test]
    fn metrics_hand_example() {
        let m = metrics(&[70.0, 80.0], &[72.0, 78.0]).unwrap();
        assert!((m.mae - 2.0).abs() < 1e-9);
        assert!((m.rmse - 2.0).abs() < 1e-9);
        assert!(m.mean_err.abs() < 1e-9);
        assert!((m.std_err - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        let id = metrics(&[60.0, 70.0, 90.0], &[60.0, 70.0, 90.0]).unwrap();
        assert_eq!((id.mae, id.rmse, id.pearson_r), (0.0, 0.0, 1.0));
        assert!(metrics(&[70.0, 70.0], &[72.0, 78.0]).is_err());
        assert!(metrics(&[70.0, 71.0], &[72.0, 72.0]).is_err());
        assert!(metrics(&[70.0], &[72.0]).is_err());
        assert!(metrics(&[70.0, 1.0], &[72.0]).is_err());
    }

    #[test]
    fn ecg_flat_signal_has_no_peaks() {
        assert!(ecg_hr(&TimeSeries::new(vec![0.0; 2560], 256.0).unwrap()).is_err());
    }

    #[test]
    fn ecg_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = TimeSeries::new(vec![0.1, -0.25, 1.5, 0.0], 256.0).unwrap();
        let p = dir.path().join("ecg.csv");
        s.save_csv(&p).unwrap();
        assert_eq!(TimeSeries::load_csv(&p, 256.0).unwrap(), s);
    }

    proptest! {
        #[test]
        fn metrics_shift_covariance(
            truth in prop::collection::vec(40.0f64..180.0, 3..20),
            noise in prop::collection::vec(-10.0f64..10.0, 20),
            c in -20.0f64..20.0,
        ) {
            let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, e)| t + e).collect();
            let shifted: Vec<f64> = pred.iter().map(|p| p + c).collect();
            if let (Ok(a), Ok(b)) = (metrics(&pred, &truth), metrics(&shifted, &truth)) {
                prop_assert!((b.mean_err - a.mean_err - c).abs() < 1e-9);
                prop_assert!((b.std_err - a.std_err).abs() < 1e-9);
                prop_assert!((b.pearson_r - a.pearson_r).abs() < 1e-9);
                let n = pred.len() as f64;
                let rhs = a.mean_err.powi(2) + (n - 1.0) / n * a.std_err.powi(2);
                prop_assert!((a.rmse.powi(2) - rhs).abs() < 1e-7);
                prop_assert!(a.rmse + 1e-12 >= a.mean_err.abs());
            }
        }

        #[test]
        fn bandpass_is_linear(
            x in prop::collection::vec(-5.0f64..5.0, 200),
            y in prop::collection::vec(-5.0f64..5.0, 200),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let fs = 30.0;
            let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let fx = bandpass_hr_band(&TimeSeries::new(x, fs).unwrap()).unwrap();
            let fy = bandpass_hr_band(&TimeSeries::new(y, fs).unwrap()).unwrap();
            let fm = bandpass_hr_band(&TimeSeries::new(mix, fs).unwrap()).unwrap();
            for i in 0..200 {
                prop_assert!((fm.samples[i] - a * fx.samples[i] - b * fy.samples[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn spectral_hr_amplitude_invariant(f in 0.8f64..3.5, alpha in 0.01f64..100.0) {
            let fs = 30.0;
            let base = sine(f, 1.0, fs, 12.0);
            let scaled: Vec<f64> = base.iter().map(|v| v * alpha).collect();
            let a = spectral_hr(&TimeSeries::new(base, fs).unwrap()).unwrap();
            let b = spectral_hr(&TimeSeries::new(scaled, fs).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
