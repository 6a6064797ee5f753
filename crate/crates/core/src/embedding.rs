//! Multi-scale overlapping spatio-temporal maps.
//!
//! Each cropped region is covered by a fixed `sqrt(n) x sqrt(n)` grid of
//! windows whose size adapts to the region, `ws = 2 * extent / (sqrt(n) + 1)`,
//! with a half-window step. Window means for every scale are stacked into one
//! column per frame, so regions of any size map to the same row count without
//! resampling pixels.
//!
//! Row layout: scales ascending, windows row-major within a scale, channels
//! R, G, B innermost.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_io::{write_json, AnchorMap, FrameSequence, LandmarkTrack};
use crate::roi::{self, round_edge, Region};

pub const MMOP_MAGIC: &[u8; 4] = b"MMOP";
pub const MMOP_VERSION: u16 = 1;

/// Ascending perfect-square window counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("scale set is empty"));
        }
        for &n in &scales {
            match exact_sqrt(n) {
                Some(s) if s >= 2 => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "scale {n} is not a perfect square with side >= 2"
                    )))
                }
            }
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("scales {scales:?} are not strictly ascending")));
        }
        Ok(ScaleSet(scales))
    }

    /// The `{25, 81, 169}` set used for full-size experiments.
    pub fn standard() -> Self {
        ScaleSet(vec![25, 81, 169])
    }

    pub fn scales(&self) -> &[usize] {
        &self.0
    }

    /// `3 * sum(n_i)`.
    pub fn rows(&self) -> usize {
        3 * self.0.iter().sum::<usize>()
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad scale {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ScaleSet::new(scales)
    }
}

impl TryFrom<Vec<usize>> for ScaleSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        ScaleSet::new(v)
    }
}

impl From<ScaleSet> for Vec<usize> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

pub(crate) fn exact_sqrt(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

/// Overlapping window layout for one region size and window count.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    pub n: usize,
    pub side: usize,
    pub ws: (f64, f64),
    pub step: (f64, f64),
}

impl WindowGrid {
    /// Real-valued upper-left corner of window `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (f64, f64) {
        (col as f64 * self.step.0, row as f64 * self.step.1)
    }

    pub fn origins(&self) -> Vec<(f64, f64)> {
        (0..self.side)
            .flat_map(|r| (0..self.side).map(move |c| (r, c)))
            .map(|(r, c)| self.origin(r, c))
            .collect()
    }

    /// Far edge of the last window along each axis, before rounding.
    pub fn extent(&self) -> (f64, f64) {
        let k = (self.side - 1) as f64;
        (self.ws.0 + k * self.step.0, self.ws.1 + k * self.step.1)
    }

    fn bounds(&self, index: usize, axis_step: f64, axis_ws: f64, limit: usize) -> (usize, usize) {
        let start = index as f64 * axis_step;
        (round_edge(start, limit), round_edge(start + axis_ws, limit))
    }
}

pub fn window_grid(region_width: usize, region_height: usize, n: usize) -> Result<WindowGrid> {
    let side = exact_sqrt(n)
        .filter(|&s| s >= 2)
        .ok_or_else(|| Error::invalid(format!("{n} is not a perfect square >= 4")))?;
    if region_width < side + 1 || region_height < side + 1 {
        return Err(Error::invalid(format!(
            "region {region_width}x{region_height} too small for {n} windows (needs {0}x{0})",
            side + 1
        )));
    }
    let denom = side as f64 + 1.0;
    let step = (region_width as f64 / denom, region_height as f64 / denom);
    Ok(WindowGrid {
        n,
        side,
        ws: (2.0 * step.0, 2.0 * step.1),
        step,
    })
}

/// Mean R, G, B of every window, windows row-major. Writes `3n` values into `out`.
fn spatial_vector_into(region: &Region, grid: &WindowGrid, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(out.len(), 3 * grid.n);
    let mut k = 0;
    for r in 0..grid.side {
        let (r0, r1) = grid.bounds(r, grid.step.1, grid.ws.1, region.height());
        for c in 0..grid.side {
            let (c0, c1) = grid.bounds(c, grid.step.0, grid.ws.0, region.width());
            if r1 <= r0 || c1 <= c0 {
                return Err(Error::invalid(format!(
                    "window ({r}, {c}) rounds to zero pixels in a {}x{} region",
                    region.width(),
                    region.height()
                )));
            }
            let sums = region.channel_sums(c0, c1, r0, r1);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..3 {
                out[k + ch] = sums[ch] as f64 / count;
            }
            k += 3;
        }
    }
    Ok(())
}

pub fn spatial_vector(region: &Region, grid: &WindowGrid) -> Result<Vec<f64>> {
    if grid.extent().0.round() as usize != region.width()
        || grid.extent().1.round() as usize != region.height()
    {
        return Err(Error::invalid(format!(
            "grid built for {:?}, region is {}x{}",
            grid.extent(),
            region.width(),
            region.height()
        )));
    }
    let mut out = vec![0.0; 3 * grid.n];
    spatial_vector_into(region, grid, &mut out)?;
    Ok(out)
}

/// Concatenated spatial vectors of one region over all scales.
pub fn multiscale_vector(region: &Region, scales: &ScaleSet) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scales.rows()];
    let mut offset = 0;
    for &n in scales.scales() {
        let grid = window_grid(region.width(), region.height(), n)?;
        spatial_vector_into(region, &grid, &mut out[offset..offset + 3 * n])?;
        offset += 3 * n;
    }
    Ok(out)
}

/// Dense row-major `rows x cols` matrix of 32-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix whose column `j` is `columns[j]`.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let mut m = FeatureMatrix::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(Error::shape(format!("column {j} has {} rows, expected {rows}", col.len())));
            }
            for (i, &v) in col.iter().enumerate() {
                m.data[i * cols + j] = v as f32;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Columns `[start, start + len)`.
    pub fn column_slice(&self, start: usize, len: usize) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        FeatureMatrix {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    /// Transposed copy in 64-bit: `cols x rows`, one row per time step.
    pub fn transposed_f64(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c] as f64;
            }
        }
        out
    }
}

/// One spatio-temporal map with its frame rate and the scales that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MastMop {
    pub map: FeatureMatrix,
    pub fps: f64,
    pub scales: ScaleSet,
}

impl MastMop {
    pub fn rows(&self) -> usize {
        self.map.rows
    }

    pub fn cols(&self) -> usize {
        self.map.cols
    }

    /// Linear interpolation of columns onto a `target_fps` time base.
    pub fn resampled(&self, target_fps: f64) -> Result<MastMop> {
        if !(target_fps > 0.0) {
            return Err(Error::invalid(format!("target fps {target_fps}")));
        }
        if (self.fps - target_fps).abs() < 1e-12 {
            return Ok(self.clone());
        }
        let t_src = self.cols();
        let duration = (t_src - 1) as f64 / self.fps;
        let t_dst = (duration * target_fps).floor() as usize + 1;
        let mut out = FeatureMatrix::zeros(self.rows(), t_dst);
        for j in 0..t_dst {
            let pos = j as f64 / target_fps * self.fps;
            let i0 = (pos.floor() as usize).min(t_src - 1);
            let i1 = (i0 + 1).min(t_src - 1);
            let frac = (pos - i0 as f64) as f32;
            for r in 0..self.rows() {
                let a = self.map.get(r, i0);
                let b = self.map.get(r, i1);
                out.set(r, j, a + (b - a) * frac);
            }
        }
        Ok(MastMop {
            map: out,
            fps: target_fps,
            scales: self.scales.clone(),
        })
    }
}

/// Foreground (face) and background (flanking strips) maps of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct MastMopPair {
    pub fore: MastMop,
    pub back: MastMop,
}

impl MastMopPair {
    pub fn new(fore: MastMop, back: MastMop) -> Result<Self> {
        if fore.rows() != back.rows() || fore.cols() != back.cols() || fore.fps != back.fps {
            return Err(Error::shape(format!(
                "fore {}x{} @ {} vs back {}x{} @ {}",
                fore.rows(),
                fore.cols(),
                fore.fps,
                back.rows(),
                back.cols(),
                back.fps
            )));
        }
        Ok(MastMopPair { fore, back })
    }

    pub fn rows(&self) -> usize {
        self.fore.rows()
    }

    pub fn cols(&self) -> usize {
        self.fore.cols()
    }

    pub fn fps(&self) -> f64 {
        self.fore.fps
    }

    pub fn resampled(&self, target_fps: f64) -> Result<MastMopPair> {
        MastMopPair::new(self.fore.resampled(target_fps)?, self.back.resampled(target_fps)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(32 + 8 * self.fore.map.data.len());
        bytes.extend_from_slice(MMOP_MAGIC);
        bytes.extend_from_slice(&MMOP_VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u16.to_le_bytes());
        bytes.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.cols() as u32).to_le_bytes());
        let scales = self.fore.scales.scales();
        bytes.extend_from_slice(&(scales.len() as u32).to_le_bytes());
        for &s in scales {
            bytes.extend_from_slice(&(s as u32).to_le_bytes());
        }
        bytes.extend_from_slice(&self.fps().to_le_bytes());
        for m in [&self.fore.map, &self.back.map] {
            for v in &m.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MastMopPair> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MMOP_MAGIC {
            return Err(Error::format("mmop", "bad magic"));
        }
        let version = cur.u16()?;
        if version != MMOP_VERSION {
            return Err(Error::format("mmop", format!("unsupported version {version}")));
        }
        cur.u16()?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let scales = (0..k).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let scales = ScaleSet::new(scales)?;
        let fps = cur.f64()?;
        if scales.rows() != rows {
            return Err(Error::format(
                "mmop",
                format!("{rows} rows inconsistent with scales {:?}", scales.scales()),
            ));
        }
        let mut read_map = || -> Result<FeatureMatrix> {
            let raw = cur.take(4 * rows * cols)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            FeatureMatrix::new(rows, cols, data)
        };
        let fore = read_map()?;
        let back = read_map()?;
        if cur.pos != bytes.len() {
            return Err(Error::format("mmop", "trailing bytes"));
        }
        MastMopPair::new(
            MastMop {
                map: fore,
                fps,
                scales: scales.clone(),
            },
            MastMop {
                map: back,
                fps,
                scales,
            },
        )
    }

    /// Writes the `<name>.mmop.json` sidecar next to an MMOP file.
    pub fn save_sidecar(&self, mmop_path: impl AsRef<Path>, video_id: &str) -> Result<()> {
        let path = sidecar_path(mmop_path.as_ref());
        let meta = MmopSidecar {
            video_id: video_id.to_string(),
            fps: self.fps(),
            scales: self.fore.scales.scales().to_vec(),
            rows: self.rows(),
            cols: self.cols(),
        };
        write_json(&path, &meta)
    }
}

pub fn sidecar_path(mmop_path: &Path) -> std::path::PathBuf {
    let name = mmop_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let stem = name.strip_suffix(".mmop").unwrap_or(&name);
    mmop_path.with_file_name(format!("{stem}.mmop.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmopSidecar {
    pub video_id: String,
    pub fps: f64,
    pub scales: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("mmop", "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

fn check_track(frames: &FrameSequence, landmarks: &LandmarkTrack) -> Result<()> {
    if landmarks.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} landmark rows for {} frames",
            landmarks.len(),
            frames.len()
        )));
    }
    Ok(())
}

/// Embeds every frame's face and background regions at all scales.
pub fn embed_sequence(
    frames: &FrameSequence,
    landmarks: &LandmarkTrack,
    anchors: &AnchorMap,
    scales: &ScaleSet,
) -> Result<MastMopPair> {
    check_track(frames, landmarks)?;
    let landmarks = landmarks.clone().clamped(frames.width(), frames.height());
    let rows = scales.rows();
    let mut fore_cols = Vec::with_capacity(frames.len());
    let mut back_cols = Vec::with_capacity(frames.len());
    for (i, (frame, lm)) in frames.frames().iter().zip(landmarks.frames()).enumerate() {
        let (face, back) = roi::frame_regions(frame, lm, anchors)
            .map_err(|e| Error::invalid(format!("frame {i}: {e}")))?;
        fore_cols.push(
            multiscale_vector(&face, scales)
                .map_err(|e| Error::invalid(format!("frame {i} face: {e}")))?,
        );
        back_cols.push(
            multiscale_vector(&back, scales)
                .map_err(|e| Error::invalid(format!("frame {i} background: {e}")))?,
        );
    }
    let fps = frames.fps();
    MastMopPair::new(
        MastMop {
            map: FeatureMatrix::from_columns(rows, &fore_cols)?,
            fps,
            scales: scales.clone(),
        },
        MastMop {
            map: FeatureMatrix::from_columns(rows, &back_cols)?,
            fps,
            scales: scales.clone(),
        },
    )
}

/// A fixed-length window of both maps, optionally labelled with its heart rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub fore: FeatureMatrix,
    pub back: FeatureMatrix,
    pub start_frame: usize,
    pub fps: f64,
    pub hr_gt: Option<f64>,
    pub normalized: bool,
}

impl ClipFeatures {
    pub fn rows(&self) -> usize {
        self.fore.rows
    }

    pub fn len(&self) -> usize {
        self.fore.cols
    }

    pub fn is_empty(&self) -> bool {
        self.fore.cols == 0
    }
}

pub fn clip_frames(fps: f64, seconds: f64) -> usize {
    (fps * seconds).round() as usize
}

pub fn slice_clips(pair: &MastMopPair, clip_seconds: f64, stride_seconds: f64) -> Result<Vec<ClipFeatures>> {
    let fps = pair.fps();
    let t = clip_frames(fps, clip_seconds);
    let step = clip_frames(fps, stride_seconds);
    if t == 0 || step == 0 {
        return Err(Error::invalid(format!(
            "clip {clip_seconds} s / stride {stride_seconds} s round to zero frames at {fps} fps"
        )));
    }
    let total = pair.cols();
    if total < t {
        return Err(Error::invalid(format!(
            "video has {total} frames, clip needs {t}"
        )));
    }
    Ok((0..=(total - t) / step)
        .map(|k| {
            let start = k * step;
            ClipFeatures {
                fore: pair.fore.map.column_slice(start, t),
                back: pair.back.map.column_slice(start, t),
                start_frame: start,
                fps,
                hr_gt: None,
                normalized: false,
            }
        })
        .collect())
}

fn minmax_rows(m: &mut FeatureMatrix) {
    let cols = m.cols;
    for row in m.data.chunks_exact_mut(cols) {
        let (lo, hi) = row
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range > 0.0 {
            for v in row.iter_mut() {
                *v = (*v - lo) / range;
            }
        } else {
            row.fill(0.5);
        }
    }
}

/// Scales every row of both maps independently to `[0, 1]`; constant rows become 0.5.
pub fn normalize_clip(mut clip: ClipFeatures) -> ClipFeatures {
    minmax_rows(&mut clip.fore);
    minmax_rows(&mut clip.back);
    clip.normalized = true;
    clip
}

/// Bilinear resize with half-pixel centres; channels interpolated independently.
pub fn resize_bilinear(region: &Region, out_w: usize, out_h: usize) -> Result<Region> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let (in_w, in_h) = (region.width(), region.height());
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let mut px = Vec::with_capacity(3 * out_w * out_h);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            let (a, b, c, d) = (
                region.pixel(x0, y0),
                region.pixel(x1, y0),
                region.pixel(x0, y1),
                region.pixel(x1, y1),
            );
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - wx) + b[ch] as f64 * wx;
                let bot = c[ch] as f64 * (1.0 - wx) + d[ch] as f64 * wx;
                px.push((top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Region::new(out_w, out_h, px)
}

/// Non-overlapping `sqrt(n) x sqrt(n)` block means of a region.
fn block_means(region: &Region, side: usize, out: &mut [f64]) -> Result<()> {
    let mut k = 0;
    for r in 0..side {
        let r0 = round_edge(r as f64 * region.height() as f64 / side as f64, region.height());
        let r1 = round_edge((r + 1) as f64 * region.height() as f64 / side as f64, region.height());
        for c in 0..side {
            let c0 = round_edge(c as f64 * region.width() as f64 / side as f64, region.width());
            let c1 = round_edge((c + 1) as f64 * region.width() as f64 / side as f64, region.width());
            if r1 <= r0 || c1 <= c0 {
                return Err(Error::invalid("resized region too small for the block grid"));
            }
            let s = region.channel_sums(c0, c1, r0, r1);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..3 {
                out[k + ch] = s[ch] as f64 / count;
            }
            k += 3;
        }
    }
    Ok(())
}

/// Resize-based single-scale map of the face region (ablation baseline).
pub fn stmap_resized(
    frames: &FrameSequence,
    landmarks: &LandmarkTrack,
    anchors: &AnchorMap,
    n: usize,
    target_size: (usize, usize),
) -> Result<MastMop> {
    Ok(stmap_resized_pair(frames, landmarks, anchors, n, target_size)?.fore)
}

/// Resize-based maps of both face and background regions.
pub fn stmap_resized_pair(
    frames: &FrameSequence,
    landmarks: &LandmarkTrack,
    anchors: &AnchorMap,
    n: usize,
    target_size: (usize, usize),
) -> Result<MastMopPair> {
    check_track(frames, landmarks)?;
    let side = exact_sqrt(n)
        .filter(|&s| s >= 2)
        .ok_or_else(|| Error::invalid(format!("{n} is not a perfect square >= 4")))?;
    let scales = ScaleSet::new(vec![n])?;
    let landmarks = landmarks.clone().clamped(frames.width(), frames.height());
    let mut fore_cols = Vec::with_capacity(frames.len());
    let mut back_cols = Vec::with_capacity(frames.len());
    for (frame, lm) in frames.frames().iter().zip(landmarks.frames()) {
        let (face, back) = roi::frame_regions(frame, lm, anchors)?;
        for (region, cols) in [(face, &mut fore_cols), (back, &mut back_cols)] {
            let resized = resize_bilinear(&region, target_size.0, target_size.1)?;
            let mut v = vec![0.0; 3 * n];
            block_means(&resized, side, &mut v)?;
            cols.push(v);
        }
    }
    let fps = frames.fps();
    MastMopPair::new(
        MastMop {
            map: FeatureMatrix::from_columns(3 * n, &fore_cols)?,
            fps,
            scales: scales.clone(),
        },
        MastMop {
            map: FeatureMatrix::from_columns(3 * n, &back_cols)?,
            fps,
            scales,
        },
    )
}
