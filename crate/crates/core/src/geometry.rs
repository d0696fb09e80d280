//! Box, point and mask arithmetic plus segmentation metrics.
//!
//! Boxes are closed real intervals in pixel coordinates; IoU is computed on
//! continuous area, never on a rasterization.

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("box exceeds the {width}x{height} image")]
    OutOfBounds { width: f64, height: f64 },
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("malformed mask payload: {0}")]
    MalformedMask(String),
}

/// Axis-aligned box `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bbox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Bbox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox {
            x1,
            y1,
            x2,
            y2,
            reason,
        };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(invalid("degenerate extent"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn within_image(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for Bbox {
    type Error = GeometryError;
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Bbox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<Bbox> for [f64; 4] {
    fn from(b: Bbox) -> Self {
        b.coords()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from(c: [f64; 2]) -> Self {
        Point::new(c[0], c[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Sum of absolute coordinate differences over the four box coordinates.
pub fn box_l1(a: &Bbox, b: &Bbox) -> f64 {
    a.coords()
        .iter()
        .zip(b.coords().iter())
        .map(|(p, q)| (p - q).abs())
        .sum()
}

pub fn point_l1(p: &Point, q: &Point) -> f64 {
    (p.x - q.x).abs() + (p.y - q.y).abs()
}

/// Normalized center-format box `[cx, cy, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Converts corner format to normalized center format.
///
/// Boxes that leave the image are rejected rather than clipped.
pub fn to_center_format(b: &Bbox, image_w: f64, image_h: f64) -> Result<CenterBox, GeometryError> {
    // Re-validate: fields are public, so a Bbox may have been built by hand.
    let b = Bbox::new(b.x1, b.y1, b.x2, b.y2)?;
    if !(image_w > 0.0 && image_h > 0.0) || !b.within_image(image_w, image_h) {
        return Err(GeometryError::OutOfBounds {
            width: image_w,
            height: image_h,
        });
    }
    Ok(CenterBox {
        cx: (b.x1 + b.x2) / (2.0 * image_w),
        cy: (b.y1 + b.y2) / (2.0 * image_h),
        w: b.width() / image_w,
        h: b.height() / image_h,
    })
}

/// Inverse of [`to_center_format`].
pub fn from_center_format(c: &CenterBox, image_w: f64, image_h: f64) -> Result<Bbox, GeometryError> {
    let half_w = c.w * image_w / 2.0;
    let half_h = c.h * image_h / 2.0;
    let cx = c.cx * image_w;
    let cy = c.cy * image_h;
    Bbox::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)
}

/// Row-major boolean raster. Serializes as the base64 of [`BinaryMask::to_bytes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != width * height {
            return Err(GeometryError::MalformedMask(format!(
                "expected {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same_dims(&self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Fills the cells whose centers fall inside the ellipse inscribed in `b`,
    /// where `b` is in image pixels and the grid covers the whole image.
    pub fn fill_ellipse(&mut self, b: &Bbox, image_w: f64, image_h: f64) {
        self.fill_with(b, image_w, image_h, |dx, dy| dx * dx + dy * dy <= 1.0);
    }

    /// Fills the cells whose centers fall inside `b`.
    pub fn fill_box(&mut self, b: &Bbox, image_w: f64, image_h: f64) {
        self.fill_with(b, image_w, image_h, |dx, dy| dx.abs() <= 1.0 && dy.abs() <= 1.0);
    }

    fn fill_with(&mut self, b: &Bbox, image_w: f64, image_h: f64, inside: impl Fn(f64, f64) -> bool) {
        let sx = self.width as f64 / image_w;
        let sy = self.height as f64 / image_h;
        let (cx, cy) = ((b.x1 + b.x2) / 2.0 * sx, (b.y1 + b.y2) / 2.0 * sy);
        let (rx, ry) = (b.width() / 2.0 * sx, b.height() / 2.0 * sy);
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if inside(dx, dy) {
                    self.set(x, y, true);
                }
            }
        }
    }

    /// Packs the mask: u32 LE width, u32 LE height, then row-major bits,
    /// most significant bit first, zero-padded to a whole byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            let mut byte = 0u8;
            for (i, &bit) in chunk.iter().enumerate() {
                if bit {
                    byte |= 0x80 >> i;
                }
            }
            out.push(byte);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        if bytes.len() < 8 {
            return Err(GeometryError::MalformedMask("header shorter than 8 bytes".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| GeometryError::MalformedMask("dimensions overflow".into()))?;
        let payload = &bytes[8..];
        if payload.len() != n.div_ceil(8) {
            return Err(GeometryError::MalformedMask(format!(
                "expected {} payload bytes for {}x{}, got {}",
                n.div_ceil(8),
                width,
                height,
                payload.len()
            )));
        }
        let bits = (0..n).map(|i| payload[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.to_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, GeometryError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text.trim())
            .map_err(|e| GeometryError::MalformedMask(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

/// Element-wise OR of equally sized masks.
impl TryFrom<String> for BinaryMask {
    type Error = GeometryError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::from_base64(&s)
    }
}

impl From<BinaryMask> for String {
    fn from(m: BinaryMask) -> String {
        m.to_base64()
    }
}

pub fn mask_or(masks: &[BinaryMask]) -> Result<BinaryMask, GeometryError> {
    let first = masks.first().ok_or(GeometryError::EmptyInput)?;
    let mut out = first.clone();
    for m in &masks[1..] {
        out.check_same_dims(m)?;
        for (o, &b) in out.bits.iter_mut().zip(m.bits.iter()) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Pixel counts `(|a ∧ b|, |a ∨ b|)`.
pub fn mask_intersection_union(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64), GeometryError> {
    a.check_same_dims(b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.bits.iter().zip(b.bits.iter()) {
        inter += (p && q) as u64;
        union += (p || q) as u64;
    }
    Ok((inter, union))
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks scoring 1.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeometryError> {
    let (inter, union) = mask_intersection_union(a, b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub giou: f64,
    pub ciou: f64,
}

/// gIoU (mean per-image IoU) and cIoU (cumulative intersection over
/// cumulative union). Images with an empty union count as IoU 1 in gIoU and
/// are absent from cIoU.
pub fn seg_metrics(per_image: &[(u64, u64)]) -> Result<SegMetrics, GeometryError> {
    if per_image.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    let giou = per_image
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum::<f64>()
        / per_image.len() as f64;
    let (si, su) = per_image
        .iter()
        .fold((0u64, 0u64), |(a, b), &(i, u)| (a + i, b + u));
    let ciou = if su == 0 { 1.0 } else { si as f64 / su as f64 };
    Ok(SegMetrics { giou, ciou })
}
