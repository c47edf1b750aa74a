//! Dominant skin colors by median-cut quantization, and their area-weighted
//! distribution over the scale palette.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::face::FaceRegion;
use super::segment::SkinMask;
use super::ColorError;
use crate::scale::{Rgb, ScalePalette};

/// Default number of dominant colors kept per face.
pub const DEFAULT_K: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominantColor {
    pub rgb: Rgb,
    /// Fraction of skin pixels represented by this color.
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelDistribution {
    /// One weight per palette scale, light to dark.
    pub weights: Vec<f64>,
    /// Representatives in non-increasing area order.
    pub dominant: Vec<DominantColor>,
    /// Set when no skin was found and the weights are uniform.
    pub fallback: bool,
}

impl PixelDistribution {
    /// Uniform weights, used when the color branch has nothing to offer.
    pub fn uniform(num_scales: usize) -> Self {
        Self {
            weights: vec![1.0 / num_scales as f64; num_scales],
            dominant: Vec::new(),
            fallback: true,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone)]
struct ColorBox {
    // distinct colors with their counts
    colors: Vec<(Rgb, u64)>,
    count: u64,
}

impl ColorBox {
    fn new(colors: Vec<(Rgb, u64)>) -> Self {
        let count = colors.iter().map(|c| c.1).sum();
        Self { colors, count }
    }

    fn splittable(&self) -> bool {
        self.colors.len() > 1
    }

    fn widest_channel(&self) -> usize {
        let mut best = (0, -1i32);
        for ch in 0..3 {
            let lo = self.colors.iter().map(|c| c.0[ch]).min().unwrap_or(0);
            let hi = self.colors.iter().map(|c| c.0[ch]).max().unwrap_or(0);
            let range = i32::from(hi) - i32::from(lo);
            if range > best.1 {
                best = (ch, range);
            }
        }
        best.0
    }

    /// Splits along the widest channel at the pixel-weighted median. Both
    /// halves keep at least one distinct color.
    fn split(mut self) -> (ColorBox, ColorBox) {
        let ch = self.widest_channel();
        self.colors.sort_by_key(|&(rgb, _)| (rgb[ch], rgb));
        let half = self.count.div_ceil(2);
        let mut acc = 0;
        let mut cut = self.colors.len() - 1;
        for (i, &(_, c)) in self.colors.iter().enumerate() {
            acc += c;
            if acc >= half {
                cut = i + 1;
                break;
            }
        }
        let cut = cut.clamp(1, self.colors.len() - 1);
        let upper = self.colors.split_off(cut);
        (ColorBox::new(self.colors), ColorBox::new(upper))
    }

    fn representative(&self) -> Rgb {
        let mut acc = [0u128; 3];
        for &(rgb, c) in &self.colors {
            for k in 0..3 {
                acc[k] += u128::from(rgb[k]) * u128::from(c);
            }
        }
        let n = u128::from(self.count);
        acc.map(|v| ((v * 2 + n) / (2 * n)) as u8)
    }
}

/// Median-cut quantization of a color histogram into at most `k`
/// representatives (exactly `min(k, distinct)`), each with its pixel count.
/// The box holding the most pixels is split first. Deterministic, and
/// independent of the order pixels were counted in.
pub fn median_cut(histogram: &BTreeMap<Rgb, u64>, k: usize) -> Vec<(Rgb, u64)> {
    if histogram.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut boxes = vec![ColorBox::new(histogram.iter().map(|(&c, &n)| (c, n)).collect())];
    let target = k.min(histogram.len());
    while boxes.len() < target {
        let idx = boxes
            .iter()
            .enumerate()
            .filter(|(_, b)| b.splittable())
            .max_by(|(ia, a), (ib, b)| a.count.cmp(&b.count).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("fewer boxes than distinct colors implies a splittable box");
        let (lo, hi) = boxes.swap_remove(idx).split();
        boxes.push(lo);
        boxes.push(hi);
    }
    let mut reps: Vec<(Rgb, u64)> = boxes.iter().map(|b| (b.representative(), b.count)).collect();
    reps.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    reps
}

/// Summarizes the skin pixels of `face` as at most `k` dominant colors and
/// accumulates their areas onto the nearest palette scale.
pub fn dominant_pixels(
    face: &FaceRegion,
    mask: &SkinMask,
    k: usize,
    palette: &ScalePalette,
) -> Result<PixelDistribution, ColorError> {
    if k == 0 {
        return Err(ColorError::InvalidK);
    }
    if mask.width != face.crop.width() || mask.height != face.crop.height() {
        return Err(ColorError::InvalidRegion("mask shape differs from crop".into()));
    }
    let mut hist = BTreeMap::new();
    for (p, &m) in face.crop.pixels().zip(&mask.mask) {
        if m {
            *hist.entry(p.0).or_insert(0u64) += 1;
        }
    }
    distribution_from_histogram(&hist, k, palette)
}

pub fn distribution_from_histogram(
    hist: &BTreeMap<Rgb, u64>,
    k: usize,
    palette: &ScalePalette,
) -> Result<PixelDistribution, ColorError> {
    let total: u64 = hist.values().sum();
    if total == 0 {
        return Err(ColorError::NoSkinPixels);
    }
    let reps = median_cut(hist, k);
    let mut weights = vec![0.0; palette.len()];
    let mut dominant = Vec::with_capacity(reps.len());
    for (rgb, count) in reps {
        let area = count as f64 / total as f64;
        let scale = palette.nearest(rgb.map(f64::from));
        weights[scale.offset()] += area;
        dominant.push(DominantColor { rgb, area });
    }
    Ok(PixelDistribution { weights, dominant, fallback: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::segment::segment_skin;
    use image::{Rgb as Px, RgbImage};

    fn all_true(w: u32, h: u32) -> SkinMask {
        let face = FaceRegion::whole(&RgbImage::from_pixel(w, h, Px([1, 2, 3])));
        let mut m = segment_skin(&face);
        m.mask = vec![true; (w * h) as usize];
        m
    }

    #[test]
    fn single_palette_color_is_one_hot() {
        let palette = ScalePalette::monk();
        let c = palette.colors()[2];
        let img = RgbImage::from_pixel(128, 128, Px(c));
        let dist =
            dominant_pixels(&FaceRegion::whole(&img), &all_true(128, 128), 15, &palette).unwrap();
        let mut expected = vec![0.0; 10];
        expected[2] = 1.0;
        assert_eq!(dist.weights, expected);
        assert_eq!(dist.dominant, vec![DominantColor { rgb: c, area: 1.0 }]);
    }

    #[test]
    fn two_colors_three_to_one() {
        let palette = ScalePalette::monk();
        let (c2, c8) = (palette.colors()[1], palette.colors()[7]);
        // 96 of 128 rows scale 2, the rest scale 8
        let img = RgbImage::from_fn(128, 128, |_, y| Px(if y < 96 { c2 } else { c8 }));
        let dist =
            dominant_pixels(&FaceRegion::whole(&img), &all_true(128, 128), 15, &palette).unwrap();
        assert_eq!(dist.weights[1], 0.75);
        assert_eq!(dist.weights[7], 0.25);
        assert_eq!(dist.weights.iter().sum::<f64>(), 1.0);
        assert_eq!(dist.dominant[0].rgb, c2);
    }

    #[test]
    fn empty_mask_has_no_skin() {
        let palette = ScalePalette::monk();
        let img = RgbImage::from_pixel(128, 128, Px([200, 150, 100]));
        let mut mask = all_true(128, 128);
        mask.mask.fill(false);
        let err = dominant_pixels(&FaceRegion::whole(&img), &mask, 15, &palette).unwrap_err();
        assert!(matches!(err, ColorError::NoSkinPixels));
    }

    #[test]
    fn cluster_count_is_min_k_distinct() {
        let mut hist = BTreeMap::new();
        for i in 0..40u8 {
            hist.insert([i * 5, 100, 200 - i], u64::from(i) + 1);
        }
        assert_eq!(median_cut(&hist, 15).len(), 15);
        assert_eq!(median_cut(&hist, 100).len(), 40);
        let reps = median_cut(&hist, 15);
        assert!(reps.windows(2).all(|w| w[0].1 >= w[1].1));
        assert_eq!(reps.iter().map(|r| r.1).sum::<u64>(), (1..=40).sum::<u64>());
    }
}
