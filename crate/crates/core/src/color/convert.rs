//! 8-bit color space conversions used by the skin segmenter.

use crate::scale::Rgb;

/// Full-range (JPEG) BT.601 YCbCr.
pub fn rgb_to_ycbcr(rgb: Rgb) -> [u8; 3] {
    let [r, g, b] = rgb.map(f64::from);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    [clamp_u8(y), clamp_u8(cb), clamp_u8(cr)]
}

pub fn ycbcr_to_rgb(ycc: [f64; 3]) -> Rgb {
    let [y, cb, cr] = ycc;
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    [clamp_u8(r), clamp_u8(g), clamp_u8(b)]
}

/// HSV with every component rescaled to 0..=255 (hue 0..360 degrees maps
/// linearly onto 0..=255). Achromatic pixels get hue 0.
pub fn rgb_to_hsv(rgb: Rgb) -> [u8; 3] {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [clamp_u8(hue_deg * 255.0 / 360.0), clamp_u8(s * 255.0), clamp_u8(max)]
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Adds `delta` (in 8-bit luma units) to the luma of every pixel, keeping
/// chroma, and clips to the displayable range.
pub fn shift_luma(image: &image::RgbImage, delta: f64) -> image::RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let [r, g, b] = p.0.map(f64::from);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
        let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        p.0 = ycbcr_to_rgb([y + delta, cb, cr]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_conversions() {
        assert_eq!(rgb_to_ycbcr([0, 0, 0]), [0, 128, 128]);
        assert_eq!(rgb_to_ycbcr([255, 255, 255]), [255, 128, 128]);
        // 224,172,105: a mid skin tone sits low in Cb and high in Cr
        let [_, cb, cr] = rgb_to_ycbcr([224, 172, 105]);
        assert_eq!((cb, cr), (86, 159));
        assert_eq!(rgb_to_hsv([255, 0, 0]), [0, 255, 255]);
        assert_eq!(rgb_to_hsv([0, 0, 255]), [170, 255, 255]);
        assert_eq!(rgb_to_hsv([20, 20, 20]), [0, 0, 20]);
    }

    #[test]
    fn ycbcr_round_trip_is_close() {
        for rgb in [[10u8, 200, 30], [224, 172, 105], [41, 36, 32], [250, 250, 250]] {
            let [y, cb, cr] = rgb_to_ycbcr(rgb).map(f64::from);
            let back = ycbcr_to_rgb([y, cb, cr]);
            for c in 0..3 {
                assert!((i32::from(back[c]) - i32::from(rgb[c])).abs() <= 2, "{rgb:?} -> {back:?}");
            }
        }
    }
}
