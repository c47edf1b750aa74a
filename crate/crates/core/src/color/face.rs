//! Face localization.
//!
//! The bundled detector is a classical skin-likelihood blob finder: pixels
//! passing either a YCbCr chroma box or an HSV hue/saturation rule are grouped
//! into 4-connected components, and every sufficiently large component is a
//! face candidate scored by how compactly it fills its bounding box. Other
//! detectors plug in through [`FaceDetector`].

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::convert::{rgb_to_hsv, rgb_to_ycbcr};
use super::ColorError;

/// Side length of the normalized face crop every downstream stage consumes.
pub const CROP_SIZE: u32 = 128;

/// Smallest accepted input side.
pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x + self.width <= width
            && self.y + self.height <= height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;

    /// All face candidates in the image, in any order.
    fn detect(&self, image: &RgbImage) -> Vec<Detection>;
}

/// A located face, already cropped and resized to `CROP_SIZE` square.
#[derive(Debug, Clone)]
pub struct FaceRegion {
    pub bbox: BoundingBox,
    pub crop: RgbImage,
    pub confidence: f64,
    /// Set when no face was found and `bbox` is the center-crop fallback.
    pub fallback: bool,
    /// Number of candidate faces the detector reported.
    pub face_count: usize,
}

impl FaceRegion {
    /// Crops `bbox` out of `image` and normalizes it.
    pub fn from_box(
        image: &RgbImage,
        bbox: BoundingBox,
        confidence: f64,
        fallback: bool,
        face_count: usize,
    ) -> Result<Self, ColorError> {
        if !bbox.fits_within(image.width(), image.height()) {
            return Err(ColorError::InvalidRegion(format!(
                "box {bbox:?} outside {}x{} image",
                image.width(),
                image.height()
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ColorError::InvalidRegion(format!("confidence {confidence} not in [0,1]")));
        }
        let view = imageops::crop_imm(image, bbox.x, bbox.y, bbox.width, bbox.height).to_image();
        let crop = normalize_crop(&view);
        Ok(Self { bbox, crop, confidence, fallback, face_count })
    }

    /// Treats the whole image as the face.
    pub fn whole(image: &RgbImage) -> Self {
        let bbox = BoundingBox { x: 0, y: 0, width: image.width(), height: image.height() };
        Self { bbox, crop: normalize_crop(image), confidence: 1.0, fallback: false, face_count: 1 }
    }
}

fn normalize_crop(image: &RgbImage) -> RgbImage {
    if image.width() == CROP_SIZE && image.height() == CROP_SIZE {
        image.clone()
    } else {
        imageops::resize(image, CROP_SIZE, CROP_SIZE, FilterType::Triangle)
    }
}

/// Detects the highest-confidence face with the bundled detector.
pub fn detect_face(image: &RgbImage) -> Result<FaceRegion, ColorError> {
    detect_face_with(&SkinBlobDetector::default(), image)
}

/// Runs `detector` and keeps its best candidate; falls back to the middle 60%
/// of each dimension with confidence 0 when nothing is found.
pub fn detect_face_with(
    detector: &dyn FaceDetector,
    image: &RgbImage,
) -> Result<FaceRegion, ColorError> {
    let (w, h) = image.dimensions();
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE {
        return Err(ColorError::ImageTooSmall { width: w, height: h });
    }
    let detections = detector.detect(image);
    let best = detections
        .iter()
        .filter(|d| d.bbox.fits_within(w, h))
        .fold(None::<&Detection>, |best, d| match best {
            Some(b) if b.confidence >= d.confidence => Some(b),
            _ => Some(d),
        });
    match best {
        Some(d) => {
            FaceRegion::from_box(image, d.bbox, d.confidence.clamp(0.0, 1.0), false, detections.len())
        }
        None => FaceRegion::from_box(image, center_box(w, h), 0.0, true, 0),
    }
}

fn center_box(w: u32, h: u32) -> BoundingBox {
    let cw = ((f64::from(w) * 0.6).round() as u32).max(1);
    let ch = ((f64::from(h) * 0.6).round() as u32).max(1);
    BoundingBox { x: (w - cw) / 2, y: (h - ch) / 2, width: cw, height: ch }
}

/// Classical skin-blob detector.
#[derive(Debug, Clone)]
pub struct SkinBlobDetector {
    /// Long side the image is reduced to before labeling components.
    pub work_size: u32,
    /// Minimum component area as a fraction of the image.
    pub min_area_fraction: f64,
    /// Margin added around the component box, as a fraction of its size.
    pub margin: f64,
}

impl Default for SkinBlobDetector {
    fn default() -> Self {
        Self { work_size: 256, min_area_fraction: 0.005, margin: 0.1 }
    }
}

/// Chai-Ngan chroma box, or warm hue with moderate saturation for darker
/// skin that falls below the Cr box.
pub fn skin_likely(rgb: [u8; 3]) -> bool {
    let [_, cb, cr] = rgb_to_ycbcr(rgb);
    if (77..=127).contains(&cb) && (133..=173).contains(&cr) {
        return true;
    }
    let [h, s, v] = rgb_to_hsv(rgb);
    // hue <= 50 degrees, saturation 0.08..0.75
    h <= 35 && (20..=191).contains(&s) && v >= 25
}

impl FaceDetector for SkinBlobDetector {
    fn name(&self) -> &str {
        "skin-blob"
    }

    fn detect(&self, image: &RgbImage) -> Vec<Detection> {
        let (w, h) = image.dimensions();
        let scale = (f64::from(self.work_size) / f64::from(w.max(h))).min(1.0);
        let work = if scale < 1.0 {
            let ww = ((f64::from(w) * scale).round() as u32).max(1);
            let wh = ((f64::from(h) * scale).round() as u32).max(1);
            imageops::resize(image, ww, wh, FilterType::Triangle)
        } else {
            image.clone()
        };
        let (ww, wh) = work.dimensions();
        let mask: Vec<bool> = work.pixels().map(|p| skin_likely(p.0)).collect();
        let min_area = (self.min_area_fraction * f64::from(ww) * f64::from(wh)).max(1.0) as usize;

        let mut out = Vec::new();
        for comp in components(&mask, ww as usize, wh as usize) {
            if comp.area < min_area {
                continue;
            }
            let bw = comp.max_x - comp.min_x + 1;
            let bh = comp.max_y - comp.min_y + 1;
            let fill = comp.area as f64 / (bw * bh) as f64;
            // map back to source coordinates, with margin
            let inv = 1.0 / scale;
            let mx = bw as f64 * self.margin;
            let my = bh as f64 * self.margin;
            let x0 = ((comp.min_x as f64 - mx) * inv).floor().max(0.0) as u32;
            let y0 = ((comp.min_y as f64 - my) * inv).floor().max(0.0) as u32;
            let x1 = (((comp.max_x + 1) as f64 + mx) * inv).ceil().min(f64::from(w)) as u32;
            let y1 = (((comp.max_y + 1) as f64 + my) * inv).ceil().min(f64::from(h)) as u32;
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            out.push(Detection {
                bbox: BoundingBox { x: x0, y: y0, width: x1 - x0, height: y1 - y0 },
                confidence: fill.clamp(0.0, 1.0),
            });
        }
        out
    }
}

struct Component {
    area: usize,
    min_x: usize,
    min_y: usize,
    max_x: usize,
    max_y: usize,
}

fn components(mask: &[bool], w: usize, h: usize) -> Vec<Component> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut c = Component { area: 0, min_x: w, min_y: h, max_x: 0, max_y: 0 };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            c.area += 1;
            c.min_x = c.min_x.min(x);
            c.max_x = c.max_x.max(x);
            c.min_y = c.min_y.min(y);
            c.max_y = c.max_y.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(c);
    }
    out
}
