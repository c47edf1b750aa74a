use serde::{Deserialize, Serialize};

use super::convert::{rgb_to_hsv, rgb_to_ycbcr};
use super::face::FaceRegion;
use super::otsu::{histogram, otsu_threshold};

/// Channel values a typical skin pixel takes, on the 0..=255 scale of each
/// channel. Otsu picks a split per channel; the side whose mean lies closer to
/// the prior is the skin side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkinPriors {
    pub cb: f64,
    pub cr: f64,
    pub hue: f64,
    pub saturation: f64,
}

impl Default for SkinPriors {
    fn default() -> Self {
        Self { cb: 102.0, cr: 150.0, hue: 15.0, saturation: 90.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Skin lies at or below the threshold.
    Below,
    /// Skin lies above the threshold.
    Above,
    /// The channel has a single populated class and does not discriminate.
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSplit {
    pub threshold: u8,
    pub side: Side,
}

impl ChannelSplit {
    fn admits(&self, v: u8) -> bool {
        match self.side {
            Side::Below => v <= self.threshold,
            Side::Above => v > self.threshold,
            Side::Any => true,
        }
    }
}

/// Per-pixel skin decision over a face crop, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinMask {
    pub width: u32,
    pub height: u32,
    pub mask: Vec<bool>,
    pub cb: ChannelSplit,
    pub cr: ChannelSplit,
    pub hue: ChannelSplit,
    pub saturation: ChannelSplit,
}

impl SkinMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.width + x) as usize]
    }

    /// The mask as a white-on-black grayscale raster.
    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }
}

fn split_channel(values: &[u8], prior: f64) -> ChannelSplit {
    let hist = histogram(values.iter().copied());
    let threshold = otsu_threshold(&hist).expect("crop is non-empty");
    let (mut w0, mut s0, mut w1, mut s1) = (0u64, 0u64, 0u64, 0u64);
    for (level, &count) in hist.iter().enumerate() {
        if level <= usize::from(threshold) {
            w0 += count;
            s0 += level as u64 * count;
        } else {
            w1 += count;
            s1 += level as u64 * count;
        }
    }
    let side = if w0 == 0 || w1 == 0 {
        Side::Any
    } else {
        let m0 = s0 as f64 / w0 as f64;
        let m1 = s1 as f64 / w1 as f64;
        if (m0 - prior).abs() <= (m1 - prior).abs() {
            Side::Below
        } else {
            Side::Above
        }
    };
    ChannelSplit { threshold, side }
}

/// Segments skin in the face crop with default priors.
pub fn segment_skin(face: &FaceRegion) -> SkinMask {
    segment_skin_with(face, &SkinPriors::default())
}

/// Otsu-thresholds Cb, Cr, H and S independently; a pixel is skin when it
/// lies on the skin side of all four splits.
pub fn segment_skin_with(face: &FaceRegion, priors: &SkinPriors) -> SkinMask {
    let crop = &face.crop;
    let n = (crop.width() * crop.height()) as usize;
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    let mut hue = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    for p in crop.pixels() {
        let [_, b, r] = rgb_to_ycbcr(p.0);
        let [h, s, _] = rgb_to_hsv(p.0);
        cb.push(b);
        cr.push(r);
        hue.push(h);
        sat.push(s);
    }
    let split_cb = split_channel(&cb, priors.cb);
    let split_cr = split_channel(&cr, priors.cr);
    let split_h = split_channel(&hue, priors.hue);
    let split_s = split_channel(&sat, priors.saturation);
    let mask = (0..n)
        .map(|i| {
            split_cb.admits(cb[i])
                && split_cr.admits(cr[i])
                && split_h.admits(hue[i])
                && split_s.admits(sat[i])
        })
        .collect();
    SkinMask {
        width: crop.width(),
        height: crop.height(),
        mask,
        cb: split_cb,
        cr: split_cr,
        hue: split_h,
        saturation: split_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn ellipse_crop(skin: [u8; 3], bg: [u8; 3]) -> (RgbImage, Vec<bool>) {
        let mut img = RgbImage::from_pixel(128, 128, Rgb(bg));
        let mut truth = vec![false; 128 * 128];
        for (x, y, p) in img.enumerate_pixels_mut() {
            let dx = (x as f64 + 0.5 - 64.0) / 40.0;
            let dy = (y as f64 + 0.5 - 64.0) / 52.0;
            if dx * dx + dy * dy <= 1.0 {
                *p = Rgb(skin);
                truth[(y * 128 + x) as usize] = true;
            }
        }
        (img, truth)
    }

    #[test]
    fn ellipse_on_dark_background() {
        let (img, truth) = ellipse_crop([224, 172, 105], [20, 20, 20]);
        let mask = segment_skin(&FaceRegion::whole(&img));
        let inside = truth.iter().filter(|&&t| t).count();
        let outside = truth.len() - inside;
        let hit = mask.mask.iter().zip(&truth).filter(|(&m, &t)| m && t).count();
        let false_pos = mask.mask.iter().zip(&truth).filter(|(&m, &t)| m && !t).count();
        assert!(hit as f64 >= 0.9 * inside as f64, "covered {hit}/{inside}");
        assert!(false_pos as f64 <= 0.05 * outside as f64, "leaked {false_pos}/{outside}");
    }

    #[test]
    fn uniform_crop_is_one_class() {
        let img = RgbImage::from_pixel(128, 128, Rgb([150, 120, 90]));
        let mask = segment_skin(&FaceRegion::whole(&img));
        let c = mask.count();
        assert!(c == 0 || c == 128 * 128);
        assert_eq!(mask.cb.side, Side::Any);
    }

    #[test]
    fn half_and_half_populations_separate() {
        // left half near the skin prior, right half a saturated blue
        let img = RgbImage::from_fn(128, 128, |x, _| {
            if x < 64 {
                Rgb([200, 140, 110])
            } else {
                Rgb([40, 90, 200])
            }
        });
        let mask = segment_skin(&FaceRegion::whole(&img));
        for y in 0..128 {
            for x in 0..128 {
                assert_eq!(mask.get(x, y), x < 64);
            }
        }
    }

    #[test]
    fn mask_image_matches_shape() {
        let (img, _) = ellipse_crop([224, 172, 105], [20, 20, 20]);
        let mask = segment_skin(&FaceRegion::whole(&img));
        let gray = mask.to_image();
        assert_eq!(gray.dimensions(), (128, 128));
        assert_eq!(gray.get_pixel(64, 64).0[0], 255);
    }
}
