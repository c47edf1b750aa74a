use super::face::FaceRegion;
use super::segment::{segment_skin_with, SkinPriors};
use super::ColorError;
use crate::scale::{ScalePalette, SkinToneScale};

/// Pixel-mean baseline: averages the segmented skin pixels and returns the
/// nearest palette scale (ties to the lighter scale).
pub fn baseline_classify(
    face: &FaceRegion,
    palette: &ScalePalette,
    priors: &SkinPriors,
) -> Result<SkinToneScale, ColorError> {
    let mask = segment_skin_with(face, priors);
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for (p, &m) in face.crop.pixels().zip(&mask.mask) {
        if m {
            for k in 0..3 {
                sum[k] += u64::from(p.0[k]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(ColorError::NoSkinPixels);
    }
    Ok(palette.nearest(sum.map(|s| s as f64 / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn face_with(skin: [u8; 3]) -> FaceRegion {
        // skin block over a saturated blue surround
        let img = RgbImage::from_fn(128, 128, |x, y| {
            if (24..104).contains(&x) && (16..112).contains(&y) {
                Rgb(skin)
            } else {
                Rgb([40, 90, 200])
            }
        });
        FaceRegion::whole(&img)
    }

    #[test]
    fn exact_palette_color() {
        let palette = ScalePalette::monk();
        let face = face_with(palette.colors()[4]);
        let got = baseline_classify(&face, &palette, &SkinPriors::default()).unwrap();
        assert_eq!(got.index(), 5);
    }

    #[test]
    fn equidistant_mean_prefers_lower_index() {
        // the skin mean (180,130,100) is exactly 20 from both references
        let palette = ScalePalette::new(
            (1..=6).map(|i| i.to_string()).collect(),
            vec![
                [250, 250, 250],
                [240, 240, 240],
                [230, 230, 230],
                [200, 130, 100],
                [160, 130, 100],
                [20, 20, 20],
            ],
        )
        .unwrap();
        let face = face_with([180, 130, 100]);
        let got = baseline_classify(&face, &palette, &SkinPriors::default()).unwrap();
        assert_eq!(got.index(), 4);
    }

    #[test]
    fn nearest_of_all_ten() {
        let palette = ScalePalette::monk();
        let skin = [135, 95, 70];
        // distances computed by hand to every Monk reference; 7 (130,92,67) is
        // nearest at sqrt(25+9+9)
        let d: Vec<f64> = palette
            .colors()
            .iter()
            .map(|c| (0..3).map(|k| (f64::from(c[k]) - f64::from(skin[k])).powi(2)).sum::<f64>())
            .collect();
        let argmin = d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmin, 6);
        let got = baseline_classify(&face_with(skin), &palette, &SkinPriors::default()).unwrap();
        assert_eq!(got.index(), 7);
    }
}
