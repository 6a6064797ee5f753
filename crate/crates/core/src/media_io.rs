//! Portable on-disk formats for frame sequences and landmark tracks.
//!
//! A video directory holds `manifest.json`, one binary PPM (P6, maxval 255)
//! per frame named `frame_%06d.ppm`, and optionally `landmarks.csv` and
//! `anchors.json`. Pixel bytes pass through untouched in both directions.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_FRAME_SIDE: usize = 16;
pub const LANDMARK_COUNT: usize = 81;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LANDMARKS_FILE: &str = "landmarks.csv";
pub const ANCHORS_FILE: &str = "anchors.json";

/// One RGB frame, row-major with interleaved 8-bit channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width < MIN_FRAME_SIDE || height < MIN_FRAME_SIDE {
            return Err(Error::invalid(format!(
                "frame {width}x{height} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "pixel buffer holds {} bytes, expected {}",
                pixels.len(),
                3 * width * height
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Frame::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Encodes the frame as a binary PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decodes a binary PPM with maxval 255. Comments in the header are allowed.
    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let magic = ppm_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::format("ppm", "not a binary P6 file"));
        }
        let width = ppm_number(bytes, &mut pos)?;
        let height = ppm_number(bytes, &mut pos)?;
        let maxval = ppm_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::format("ppm", format!("maxval {maxval}, expected 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format("ppm", "missing raster separator"));
        }
        pos += 1;
        let need = 3 * width * height;
        let raster = &bytes[pos..];
        if raster.len() != need {
            return Err(Error::format(
                "ppm",
                format!("raster has {} bytes, expected {need}", raster.len()),
            ));
        }
        Frame::new(width, height, raster.to_vec())
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("ppm", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = ppm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("ppm", "non-numeric header field"))
}

/// Ordered frames sharing one size, plus the capture rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("a frame sequence needs at least one frame"))?;
        let (w, h) = (first.width, first.height);
        if let Some((i, f)) = frames
            .iter()
            .enumerate()
            .find(|(_, f)| f.width != w || f.height != h)
        {
            return Err(Error::invalid(format!(
                "frame {i} is {}x{}, expected {w}x{h}",
                f.width, f.height
            )));
        }
        Ok(FrameSequence { frames, fps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if !(m.fps.is_finite() && m.fps > 0.0) || m.frames == 0 {
        return Err(Error::format(
            "manifest",
            format!("fps {} / frames {} out of range", m.fps, m.frames),
        ));
    }
    Ok(m)
}

pub fn load_frame_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frames);
    for i in 0..manifest.frames {
        let path = dir.join(frame_file_name(i));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::format("frame sequence", format!("missing frame {i}")))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let frame = Frame::from_ppm(&bytes).map_err(|e| {
            Error::format("frame sequence", format!("frame {i}: {e}"))
        })?;
        if frame.width != manifest.width || frame.height != manifest.height {
            return Err(Error::format(
                "frame sequence",
                format!(
                    "frame {i} is {}x{}, manifest says {}x{}",
                    frame.width, frame.height, manifest.width, manifest.height
                ),
            ));
        }
        frames.push(frame);
    }
    if dir.join(frame_file_name(manifest.frames)).exists() {
        return Err(Error::format(
            "frame sequence",
            format!("more frame files than the {} in the manifest", manifest.frames),
        ));
    }
    FrameSequence::new(frames, manifest.fps)
}

pub fn write_frame_sequence(seq: &FrameSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        fps: seq.fps,
        width: seq.width(),
        height: seq.height(),
        frames: seq.len(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = dir.join(frame_file_name(i));
        fs::write(&path, frame.to_ppm()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Which landmark indices play the geometric roles used for box construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorMap {
    pub left_cheek_outer: usize,
    pub right_cheek_outer: usize,
    pub chin: usize,
    pub eyebrow_center: usize,
}

impl AnchorMap {
    pub fn new(
        left_cheek_outer: usize,
        right_cheek_outer: usize,
        chin: usize,
        eyebrow_center: usize,
    ) -> Result<Self> {
        let map = AnchorMap {
            left_cheek_outer,
            right_cheek_outer,
            chin,
            eyebrow_center,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let idx = self.indices();
        if let Some(&bad) = idx.iter().find(|&&i| i >= LANDMARK_COUNT) {
            return Err(Error::invalid(format!(
                "anchor index {bad} outside 0..{LANDMARK_COUNT}"
            )));
        }
        for a in 0..4 {
            for b in a + 1..4 {
                if idx[a] == idx[b] {
                    return Err(Error::invalid(format!(
                        "anchor index {} used twice",
                        idx[a]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self) -> [usize; 4] {
        [
            self.left_cheek_outer,
            self.right_cheek_outer,
            self.chin,
            self.eyebrow_center,
        ]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let map: AnchorMap = read_json(path.as_ref())?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

pub type LandmarkFrame = [Point; LANDMARK_COUNT];

/// Per-frame landmark sets together with the anchor convention that reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTrack {
    frames: Vec<LandmarkFrame>,
    anchors: AnchorMap,
}

impl LandmarkTrack {
    pub fn new(frames: Vec<LandmarkFrame>, anchors: AnchorMap) -> Result<Self> {
        anchors.validate()?;
        Ok(LandmarkTrack { frames, anchors })
    }

    pub fn frames(&self) -> &[LandmarkFrame] {
        &self.frames
    }

    pub fn anchors(&self) -> &AnchorMap {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Clamps every point into `[0, width] x [0, height]`.
    pub fn clamped(mut self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        for frame in &mut self.frames {
            for p in frame.iter_mut() {
                p.x = p.x.clamp(0.0, w);
                p.y = p.y.clamp(0.0, h);
            }
        }
        self
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        for frame in &mut out.frames {
            for p in frame.iter_mut() {
                p.x += dx;
                p.y += dy;
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame");
        for i in 0..LANDMARK_COUNT {
            let _ = write!(s, ",x{i},y{i}");
        }
        s.push('\n');
        for (i, frame) in self.frames.iter().enumerate() {
            let _ = write!(s, "{i}");
            for p in frame {
                let _ = write!(s, ",{},{}", p.x, p.y);
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_landmarks(text: &str, anchors: AnchorMap) -> Result<LandmarkTrack> {
    anchors.validate()?;
    let expected_cols = 1 + 2 * LANDMARK_COUNT;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::format("landmarks", "empty file"))?;
    if header.split(',').count() != expected_cols {
        return Err(Error::format(
            "landmarks",
            format!("header has {} columns, expected {expected_cols}", header.split(',').count()),
        ));
    }
    let mut frames = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != expected_cols {
            return Err(Error::format(
                "landmarks",
                format!("row {row} has {} columns, expected {expected_cols}", cells.len()),
            ));
        }
        let mut frame = [Point::default(); LANDMARK_COUNT];
        for (k, p) in frame.iter_mut().enumerate() {
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::format("landmarks", format!("row {row}: non-numeric cell {s:?}"))
                    })
            };
            p.x = parse(cells[1 + 2 * k])?;
            p.y = parse(cells[2 + 2 * k])?;
        }
        frames.push(frame);
    }
    LandmarkTrack::new(frames, anchors)
}

pub fn load_landmarks(path: impl AsRef<Path>, anchors: AnchorMap) -> Result<LandmarkTrack> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(&text, anchors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(w: usize, h: usize, salt: u8) -> Frame {
        let mut px = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                px.push((x * 7 + y) as u8 ^ salt);
                px.push((x + y * 3) as u8);
                px.push(salt.wrapping_mul(x as u8));
            }
        }
        Frame::new(w, h, px).unwrap()
    }

    #[test]
    fn single_small_frame_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let seq = FrameSequence::new(vec![gradient_frame(16, 16, 1)], 30.0).unwrap();
        write_frame_sequence(&seq, dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.frames, 1);
        let len = fs::metadata(dir.path().join("frame_000000.ppm")).unwrap().len();
        // "P6\n16 16\n255\n" is 13 bytes
        assert_eq!(len as usize, 3 * 256 + 13);
    }

    #[test]
    fn roundtrip_is_bitwise_and_keeps_fps_precision() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..5).map(|i| gradient_frame(20, 17, i as u8)).collect();
        let seq = FrameSequence::new(frames, 29.97).unwrap();
        write_frame_sequence(&seq, dir.path()).unwrap();
        let back = load_frame_sequence(dir.path()).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.fps(), 29.97);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("29.97"));
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..10).map(|i| gradient_frame(16, 16, i as u8)).collect();
        write_frame_sequence(&FrameSequence::new(frames, 30.0).unwrap(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_000007.ppm")).unwrap();
        let err = load_frame_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing frame 7"), "{err}");
    }

    #[test]
    fn rejects_bad_frame_files() {
        assert!(Frame::from_ppm(b"P3\n16 16\n255\n").is_err());
        let mut f = gradient_frame(16, 16, 0).to_ppm();
        f[10] = b'1'; // maxval 155
        assert!(Frame::from_ppm(&f).is_err());
        let f = gradient_frame(16, 16, 0).to_ppm();
        assert!(Frame::from_ppm(&f[..f.len() - 1]).is_err());
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let frame = gradient_frame(16, 16, 3);
        let mut bytes = b"P6\n# made by hand\n16 16\n255\n".to_vec();
        bytes.extend_from_slice(frame.pixels());
        assert_eq!(Frame::from_ppm(&bytes).unwrap(), frame);
    }

    #[test]
    fn inconsistent_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3).map(|i| gradient_frame(16, 16, i as u8)).collect();
        write_frame_sequence(&FrameSequence::new(frames, 30.0).unwrap(), dir.path()).unwrap();
        fs::write(dir.path().join("frame_000001.ppm"), gradient_frame(18, 16, 0).to_ppm()).unwrap();
        assert!(load_frame_sequence(dir.path()).is_err());
        assert!(FrameSequence::new(
            vec![gradient_frame(16, 16, 0), gradient_frame(17, 16, 0)],
            30.0
        )
        .is_err());
    }

    #[test]
    fn manifest_count_mismatch_and_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let frames = (0..3).map(|i| gradient_frame(16, 16, i as u8)).collect();
        write_frame_sequence(&FrameSequence::new(frames, 30.0).unwrap(), dir.path()).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"fps": 30.0, "width": 16, "height": 16, "frames": 2}"#,
        )
        .unwrap();
        assert!(load_frame_sequence(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"fps": 30.0}"#).unwrap();
        assert!(load_frame_sequence(dir.path()).is_err());
    }

    #[test]
    fn frame_invariants() {
        assert!(Frame::new(15, 16, vec![0; 3 * 15 * 16]).is_err());
        assert!(Frame::new(16, 16, vec![0; 3 * 16 * 16 - 1]).is_err());
        assert!(FrameSequence::new(vec![], 30.0).is_err());
        assert!(FrameSequence::new(vec![gradient_frame(16, 16, 0)], 0.0).is_err());
    }

    fn track_csv(rows: usize, coords: usize) -> String {
        let mut s = String::from("frame");
        for i in 0..LANDMARK_COUNT {
            s += &format!(",x{i},y{i}");
        }
        s.push('\n');
        for r in 0..rows {
            s += &r.to_string();
            for c in 0..coords {
                s += &format!(",{}.25", c + r);
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn landmark_rows_and_columns() {
        let anchors = AnchorMap::new(0, 16, 8, 40).unwrap();
        let track = parse_landmarks(&track_csv(300, 162), anchors).unwrap();
        assert_eq!(track.len(), 300);
        assert_eq!(track.frames()[2][1], Point::new(4.25, 5.25));
        assert!(parse_landmarks(&track_csv(3, 160), anchors).is_err());
        let bad = track_csv(2, 162).replace("5.25", "abc");
        assert!(parse_landmarks(&bad, anchors).is_err());
    }

    #[test]
    fn anchor_validation() {
        assert!(AnchorMap::new(0, 16, 8, 40).is_ok());
        assert!(AnchorMap::new(0, 0, 8, 40).is_err());
        assert!(AnchorMap::new(0, 16, 8, 81).is_err());
        let json = r#"{"left_cheek_outer": 0, "right_cheek_outer": 16, "chin": 8, "eyebrow_center": 40}"#;
        let m: AnchorMap = serde_json::from_str(json).unwrap();
        assert_eq!(m, AnchorMap::new(0, 16, 8, 40).unwrap());
    }

    #[test]
    fn landmark_csv_roundtrip_and_clamp() {
        let anchors = AnchorMap::new(0, 16, 8, 40).unwrap();
        let track = parse_landmarks(&track_csv(4, 162), anchors).unwrap();
        let again = parse_landmarks(&track.to_csv(), anchors).unwrap();
        assert_eq!(track, again);
        let c = track.clamped(20, 20);
        assert!(c
            .frames()
            .iter()
            .flatten()
            .all(|p| (0.0..=20.0).contains(&p.x) && (0.0..=20.0).contains(&p.y)));
    }
}
