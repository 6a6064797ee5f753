//! Face and background regions of interest.
//!
//! The face box spans the outer cheek points horizontally and extends 1.2x the
//! eyebrow-to-chin distance upward from the chin. Two background strips of
//! width `0.2 * face_width` flank it left and right and are concatenated side
//! by side. Box edges stay real-valued until [`crop`] rounds them once
//! (half-to-even); no interpolation ever touches pixel values.

use crate::error::{Error, Result};
use crate::media_io::{AnchorMap, Frame, LandmarkFrame};

pub const FACE_HEIGHT_FACTOR: f64 = 1.2;
pub const BACKGROUND_PAD_FACTOR: f64 = 0.2;

/// Axis-aligned box; `(x1, y1)` upper-left and `(x2, y2)` lower-right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Integer pixel span `[c0, c1) x [r0, r1)` after rounding and clipping to
    /// a `width x height` image. `None` when nothing survives.
    pub fn pixel_span(&self, width: usize, height: usize) -> Option<PixelSpan> {
        let c0 = round_edge(self.x1, width);
        let c1 = round_edge(self.x2, width);
        let r0 = round_edge(self.y1, height);
        let r1 = round_edge(self.y2, height);
        (c1 > c0 && r1 > r0).then_some(PixelSpan { c0, c1, r0, r1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelSpan {
    pub c0: usize,
    pub c1: usize,
    pub r0: usize,
    pub r1: usize,
}

impl PixelSpan {
    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }
}

#[inline]
pub(crate) fn round_edge(v: f64, limit: usize) -> usize {
    v.round_ties_even().clamp(0.0, limit as f64) as usize
}

/// A rectangular block of RGB pixels copied out of a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Region {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("region must be at least 1x1"));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "region buffer holds {} bytes, expected {}",
                pixels.len(),
                3 * width * height
            )));
        }
        Ok(Region {
            width,
            height,
            pixels,
        })
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

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Per-channel sums over `[c0, c1) x [r0, r1)`.
    pub(crate) fn channel_sums(&self, c0: usize, c1: usize, r0: usize, r1: usize) -> [u64; 3] {
        let mut acc = [0u64; 3];
        for y in r0..r1 {
            let row = &self.pixels[3 * (y * self.width + c0)..3 * (y * self.width + c1)];
            for px in row.chunks_exact(3) {
                acc[0] += px[0] as u64;
                acc[1] += px[1] as u64;
                acc[2] += px[2] as u64;
            }
        }
        acc
    }

    /// Mean (R, G, B) over the whole region.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let s = self.channel_sums(0, self.width, 0, self.height);
        let n = (self.width * self.height) as f64;
        [s[0] as f64 / n, s[1] as f64 / n, s[2] as f64 / n]
    }
}

pub fn face_bbox(landmarks: &LandmarkFrame, anchors: &AnchorMap) -> Result<BoundingBox> {
    let left = landmarks[anchors.left_cheek_outer];
    let right = landmarks[anchors.right_cheek_outer];
    let chin = landmarks[anchors.chin];
    let brow = landmarks[anchors.eyebrow_center];
    let w_face = right.x - left.x;
    let h_face = FACE_HEIGHT_FACTOR * (chin.y - brow.y);
    if !(w_face > 0.0) {
        return Err(Error::invalid(format!(
            "cheek points give non-positive face width {w_face}"
        )));
    }
    if !(h_face > 0.0) {
        return Err(Error::invalid(format!(
            "chin is not below the eyebrow centre (height {h_face})"
        )));
    }
    BoundingBox::new(left.x, chin.y - h_face, right.x, chin.y)
}

/// Left and right background strips, each `0.2 * face_width` wide, clamped
/// horizontally to `[0, frame_width]`.
pub fn background_bboxes(face: &BoundingBox, frame_width: usize) -> Result<(BoundingBox, BoundingBox)> {
    let pad = BACKGROUND_PAD_FACTOR * face.width();
    let fw = frame_width as f64;
    let left = [(face.x1 - pad).clamp(0.0, fw), face.x1.clamp(0.0, fw)];
    let right = [face.x2.clamp(0.0, fw), (face.x2 + pad).clamp(0.0, fw)];
    for (side, [a, b]) in [("left", left), ("right", right)] {
        if b - a < 1.0 {
            return Err(Error::invalid(format!(
                "{side} background strip is {:.3} px wide after clamping",
                b - a
            )));
        }
    }
    Ok((
        BoundingBox::new(left[0], face.y1, left[1], face.y2)?,
        BoundingBox::new(right[0], face.y1, right[1], face.y2)?,
    ))
}

/// Copies the pixels of `bbox` (edges rounded half-to-even, clipped to the frame).
pub fn crop(frame: &Frame, bbox: &BoundingBox) -> Result<Region> {
    let span = bbox
        .pixel_span(frame.width(), frame.height())
        .ok_or_else(|| Error::invalid(format!("box {:?} does not intersect the frame", bbox.as_array())))?;
    let mut pixels = Vec::with_capacity(3 * span.width() * span.height());
    let src = frame.pixels();
    let stride = 3 * frame.width();
    for y in span.r0..span.r1 {
        pixels.extend_from_slice(&src[y * stride + 3 * span.c0..y * stride + 3 * span.c1]);
    }
    Region::new(span.width(), span.height(), pixels)
}

/// Crops both strips and places them side by side, left strip first.
pub fn crop_concat_background(frame: &Frame, left: &BoundingBox, right: &BoundingBox) -> Result<Region> {
    let l = crop(frame, left)?;
    let r = crop(frame, right)?;
    if l.height != r.height {
        return Err(Error::invalid(format!(
            "background strips have heights {} and {}",
            l.height, r.height
        )));
    }
    let width = l.width + r.width;
    let mut pixels = Vec::with_capacity(3 * width * l.height);
    for y in 0..l.height {
        pixels.extend_from_slice(&l.pixels[3 * y * l.width..3 * (y + 1) * l.width]);
        pixels.extend_from_slice(&r.pixels[3 * y * r.width..3 * (y + 1) * r.width]);
    }
    Region::new(width, l.height, pixels)
}

/// Face region and concatenated background region for one frame.
pub fn frame_regions(frame: &Frame, landmarks: &LandmarkFrame, anchors: &AnchorMap) -> Result<(Region, Region)> {
    let face = face_bbox(landmarks, anchors)?;
    let (left, right) = background_bboxes(&face, frame.width())?;
    Ok((crop(frame, &face)?, crop_concat_background(frame, &left, &right)?))
}
