//! Procedural face renderer.
//!
//! Draws a frontal head-and-shoulders figure with group-dependent facial
//! geometry, a gender hair cue, age cues, skin albedo interpolated along the
//! Monk swatches and a global illumination model. Backgrounds are saturated
//! cool colors and hair is neutral, so neither reads as skin.
//!
//! Used by the mock generation backend, the synthetic topology corpus and the
//! three-class stand-in dataset.

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::labeling::Gender;
use crate::prompts::{parse_gender_annotation, parse_skin_annotation};
use crate::scale::{ScalePalette, SkinToneScale};
use crate::topology::{AgeGroup, BodyShape, Environment, PromptGender, TopologyGroup};

/// Everything needed to render one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpec {
    pub group: TopologyGroup,
    pub gender: PromptGender,
    pub body: BodyShape,
    pub age: AgeGroup,
    /// Continuous position on the Monk scale, 1.0..=10.0.
    pub tone: f64,
    /// Global multiplicative light level; 1.0 is neutral.
    pub illumination: f64,
    /// Left-to-right light gradient, roughly -0.3..0.3.
    pub side_light: f64,
    pub background: [u8; 3],
    pub hair: [u8; 3],
    pub clothes: [u8; 3],
    /// Per-channel uniform noise amplitude in 8-bit levels.
    pub noise: u8,
    /// Seeds geometric jitter and pixel noise.
    pub detail_seed: u64,
    pub size: u32,
}

impl FaceSpec {
    pub fn environment_light(env: Environment) -> f64 {
        match env {
            Environment::Dim => 0.62,
            Environment::Natural => 1.0,
            Environment::Bright => 1.3,
        }
    }
}

const BACKGROUNDS: [[u8; 3]; 6] = [
    [70, 110, 175],
    [60, 140, 150],
    [85, 150, 105],
    [120, 95, 170],
    [55, 90, 140],
    [100, 160, 185],
];
const CLOTHES: [[u8; 3]; 4] = [[40, 60, 120], [30, 100, 90], [90, 60, 140], [50, 120, 170]];
const DARK_HAIR: [[u8; 3]; 3] = [[22, 22, 26], [48, 48, 54], [30, 32, 44]];
const SILVER_HAIR: [u8; 3] = [178, 178, 186];

/// Skin albedo for a continuous Monk position, interpolating the swatches.
pub fn monk_tone(tone: f64) -> [f64; 3] {
    let palette = ScalePalette::monk();
    let colors = palette.colors();
    let t = tone.clamp(1.0, 10.0) - 1.0;
    let lo = (t.floor() as usize).min(8);
    let f = t - lo as f64;
    let (a, b) = (colors[lo], colors[lo + 1]);
    [0, 1, 2].map(|c| f64::from(a[c]) * (1.0 - f) + f64::from(b[c]) * f)
}

struct Geometry {
    rx: f64,
    ry: f64,
    power: f64,
    eye_w: f64,
    eye_h: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_tilt: f64,
    nose_w: f64,
    nose_h: f64,
    lip_w: f64,
    lip_h: f64,
    brow_h: f64,
}

fn geometry(group: TopologyGroup) -> Geometry {
    let g = |rx, ry, power, eye_w, eye_h, eye_tilt, nose_w, nose_h, lip_w, lip_h, brow_h, eye_y| Geometry {
        rx,
        ry,
        power,
        eye_w,
        eye_h,
        eye_dx: 0.10,
        eye_y,
        eye_tilt,
        nose_w,
        nose_h,
        lip_w,
        lip_h,
        brow_h,
    };
    match group {
        TopologyGroup::European => g(0.24, 0.33, 2.0, 0.045, 0.022, 0.0, 0.022, 0.095, 0.070, 0.011, 0.008, -0.06),
        TopologyGroup::Asian => g(0.28, 0.30, 2.0, 0.048, 0.010, 0.25, 0.030, 0.050, 0.058, 0.016, 0.007, -0.05),
        TopologyGroup::PacificIslander => g(0.30, 0.33, 2.4, 0.050, 0.028, 0.0, 0.052, 0.060, 0.085, 0.022, 0.011, -0.05),
        TopologyGroup::African => g(0.26, 0.34, 2.2, 0.050, 0.026, 0.0, 0.058, 0.070, 0.090, 0.030, 0.008, -0.05),
        TopologyGroup::SouthAsian => g(0.25, 0.34, 1.7, 0.056, 0.030, -0.08, 0.030, 0.085, 0.064, 0.018, 0.017, -0.06),
        TopologyGroup::NativeAmerican => g(0.28, 0.34, 3.2, 0.040, 0.015, 0.12, 0.036, 0.095, 0.072, 0.013, 0.015, -0.09),
    }
}

fn inside_ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let a = (u - cx) / rx;
    let b = (v - cy) / ry;
    a * a + b * b <= 1.0
}

fn tilted_ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, tilt: f64) -> bool {
    let (s, c) = tilt.sin_cos();
    let du = u - cx;
    let dv = v - cy;
    inside_ellipse(du * c + dv * s, -du * s + dv * c, 0.0, 0.0, rx, ry)
}

fn scale_rgb(c: [f64; 3], k: f64) -> [f64; 3] {
    c.map(|x| x * k)
}

fn to_f64(c: [u8; 3]) -> [f64; 3] {
    c.map(f64::from)
}

/// Renders a face image. Pure function of the spec.
pub fn render_face(spec: &FaceSpec) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.detail_seed);
    let base = geometry(spec.group);
    let mut jitter = |x: f64, amount: f64| x * (1.0 + rng.random_range(-amount..=amount));
    let body_scale = match spec.body {
        BodyShape::Thin => 0.94,
        BodyShape::Average => 1.0,
        BodyShape::Large => 1.08,
    };
    let geo = Geometry {
        rx: jitter(base.rx * body_scale, 0.04),
        ry: jitter(base.ry, 0.03),
        power: base.power,
        eye_w: jitter(base.eye_w, 0.08),
        eye_h: jitter(base.eye_h, 0.08),
        eye_dx: jitter(base.eye_dx, 0.05),
        eye_y: base.eye_y,
        eye_tilt: base.eye_tilt,
        nose_w: jitter(base.nose_w, 0.08),
        nose_h: jitter(base.nose_h, 0.08),
        lip_w: jitter(base.lip_w, 0.08),
        lip_h: jitter(base.lip_h, 0.08),
        brow_h: jitter(base.brow_h, 0.1),
    };
    let cx = rng.random_range(-0.02..=0.02);
    let cy = -0.06 + rng.random_range(-0.02..=0.02);
    let (neck_w, shoulder_w) = match spec.body {
        BodyShape::Thin => (0.07, 0.30),
        BodyShape::Average => (0.09, 0.37),
        BodyShape::Large => (0.12, 0.46),
    };

    let skin = monk_tone(spec.tone);
    let sclera = [236.0, 236.0, 230.0];
    let iris = [40.0, 32.0, 30.0];
    let lips = [skin[0] * 0.72, skin[1] * 0.52, skin[2] * 0.52];
    let nose_shade = scale_rgb(skin, 0.86);
    let hair = to_f64(spec.hair);
    let clothes = to_f64(spec.clothes);
    let background = to_f64(spec.background);
    let lines = match spec.age {
        AgeGroup::Young => 0,
        AgeGroup::Middle => 1,
        AgeGroup::Senior => 3,
    };

    let size = spec.size;
    let n = f64::from(size);
    let noise = i32::from(spec.noise);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (f64::from(x) + 0.5) / n - 0.5;
            let v = (f64::from(y) + 0.5) / n - 0.5;
            // Background with a slight vertical gradient.
            let mut color = scale_rgb(background, 1.0 - 0.15 * v);

            let in_face = {
                let a = ((u - cx) / geo.rx).abs().powf(geo.power);
                let b = ((v - cy) / geo.ry).abs().powf(geo.power);
                a + b <= 1.0
            };
            let shoulders = inside_ellipse(u, v, cx, 0.52, shoulder_w, 0.2);
            let neck = (u - cx).abs() <= neck_w && v > cy && v < 0.42;
            let long_hair = spec.gender == PromptGender::Female
                && (u - cx).abs() <= geo.rx + 0.07
                && v >= cy - geo.ry - 0.03
                && v <= 0.30
                && inside_ellipse(u, v.min(cy), cx, cy, geo.rx + 0.07, geo.ry + 0.04);
            let cap = inside_ellipse(u, v, cx, cy - geo.ry * 0.18, geo.rx + 0.02, geo.ry * 0.9)
                && v < cy - geo.ry * 0.55;

            if shoulders {
                color = clothes;
            }
            if long_hair {
                color = hair;
            }
            if neck {
                color = scale_rgb(skin, 0.88);
            }
            if in_face {
                let du = (u - cx) / geo.rx;
                let dv = (v - cy) / geo.ry;
                color = scale_rgb(skin, 1.0 - 0.07 * (du * du + dv * dv));
                let ey = cy + geo.eye_y;
                for side in [-1.0, 1.0] {
                    let ex = cx + side * geo.eye_dx;
                    let tilt = -side * geo.eye_tilt;
                    if tilted_ellipse(u, v, ex, ey, geo.eye_w, geo.eye_h, tilt) {
                        color = if inside_ellipse(u, v, ex, ey, geo.eye_h * 0.9, geo.eye_h * 0.9) {
                            iris
                        } else {
                            sclera
                        };
                    }
                    let by = ey - geo.eye_h - 0.025;
                    if tilted_ellipse(u, v, ex, by, geo.eye_w * 1.1, geo.brow_h, tilt * 0.5) {
                        color = hair;
                    }
                }
                if inside_ellipse(u, v, cx, ey + geo.nose_h * 0.6, geo.nose_w, geo.nose_h * 0.6) {
                    color = nose_shade;
                }
                let my = ey + geo.nose_h * 1.2 + 0.05;
                if inside_ellipse(u, v, cx, my, geo.lip_w, geo.lip_h) {
                    color = lips;
                }
                for l in 0..lines {
                    let ly = cy - geo.ry * 0.62 + f64::from(l) * 0.025;
                    if (v - ly).abs() < 0.003 && (u - cx).abs() < geo.rx * 0.45 {
                        color = scale_rgb(skin, 0.78);
                    }
                }
            }
            if cap {
                color = hair;
            }

            let light = spec.illumination * (1.0 + spec.side_light * u / 0.5);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let jitter = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                px[c] = (color[c] * light + f64::from(jitter)).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Controls how the mock backend fills attributes a prompt leaves open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Length of the seed cycle over which open attributes are stratified.
    pub cycle: u32,
    /// Share of male figures within each cycle.
    pub male_fraction: f64,
    /// Relative frequency of each Monk scale within each cycle.
    pub scale_weights: [f64; 10],
    /// Forces every image to this Monk scale.
    pub fixed_scale: Option<u8>,
    pub size: u32,
    pub noise: u8,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { cycle: 10, male_fraction: 0.5, scale_weights: [1.0; 10], fixed_scale: None, size: 256, noise: 3 }
    }
}

fn keyed_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fairlens-mock");
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Splits `cycle` slots among weights by largest remainder; ties go to the
/// lower index.
fn apportion(weights: &[f64], cycle: u32) -> Vec<u32> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * f64::from(cycle)).collect();
    let mut counts: Vec<u32> = quotas.iter().map(|q| q.floor() as u32).collect();
    let mut left = cycle - counts.iter().sum::<u32>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Derives the render spec for a mock generation call.
///
/// Attributes named in the prompt are honoured. Gender and skin scale left
/// open are stratified over the seed cycle: within any `cycle` consecutive
/// seeds the configured proportions hold exactly. Everything else is drawn
/// from a keyed hash of (prompt, seed).
pub fn mock_face_spec(prompt: &str, seed: u64, config: &MockConfig) -> FaceSpec {
    let ph = keyed_hash(&[prompt.as_bytes()]);
    let detail = keyed_hash(&[prompt.as_bytes(), &seed.to_le_bytes()]);
    let mut rng = ChaCha8Rng::seed_from_u64(detail);
    let cycle = u64::from(config.cycle.max(1));
    let slot = |offset: u64| ((ph.wrapping_add(offset) % cycle + seed % cycle) % cycle) as u32;

    let gender = match parse_gender_annotation(prompt) {
        Some(Gender::Female) => Some(PromptGender::Female),
        Some(_) => Some(PromptGender::Male),
        None => None,
    };
    let gender = gender.unwrap_or_else(|| {
        let males = (config.male_fraction * cycle as f64).round() as u32;
        if slot(0) < males {
            PromptGender::Male
        } else {
            PromptGender::Female
        }
    });

    let scale = if let Some(s) = config.fixed_scale {
        s
    } else if let Some([lo, hi]) = parse_skin_annotation(prompt).map(|g| g.monk_scales()) {
        if rng.random_bool(0.5) {
            lo
        } else {
            hi
        }
    } else {
        let counts = apportion(&config.scale_weights, config.cycle.max(1));
        let mut k = slot(ph >> 32);
        let mut scale = 10;
        for (i, c) in counts.iter().enumerate() {
            if k < *c {
                scale = i as u8 + 1;
                break;
            }
            k -= c;
        }
        scale
    };

    let group = TopologyGroup::find_in(prompt)
        .unwrap_or(TopologyGroup::ALL[(detail % 6) as usize]);
    let body = BodyShape::find_in(prompt).unwrap_or(*BodyShape::ALL.choose(&mut rng).unwrap());
    let age = AgeGroup::find_in(prompt).unwrap_or(*AgeGroup::ALL.choose(&mut rng).unwrap());
    let env = Environment::find_in(prompt).unwrap_or(Environment::Natural);
    let hair = if age == AgeGroup::Senior { SILVER_HAIR } else { *DARK_HAIR.choose(&mut rng).unwrap() };

    FaceSpec {
        group,
        gender,
        body,
        age,
        tone: f64::from(scale),
        illumination: FaceSpec::environment_light(env) * rng.random_range(0.97..=1.03),
        side_light: rng.random_range(-0.08..=0.08),
        background: *BACKGROUNDS.choose(&mut rng).unwrap(),
        hair,
        clothes: *CLOTHES.choose(&mut rng).unwrap(),
        noise: config.noise,
        detail_seed: detail,
        size: config.size,
    }
}

/// Mock generation: a pure function of (prompt, seed, config).
pub fn mock_image(prompt: &str, seed: u64, config: &MockConfig) -> (RgbImage, FaceSpec) {
    let spec = mock_face_spec(prompt, seed, config);
    (render_face(&spec), spec)
}

/// One rendered sample with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub spec: FaceSpec,
    /// Class label in the dataset's own scale.
    pub scale: SkinToneScale,
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Three-class (white / brown / black) corpus standing in for a real
/// in-the-wild skintone dataset.
///
/// Class 1 spans Monk 1-3, class 2 Monk 4-7, class 3 Monk 8-10. Light level
/// varies continuously over 0.6..1.4 with side lighting, so raw skin color is
/// an unreliable cue near class borders. Face geometry is correlated with the
/// class through the group mix, which mirrors how face structure and skin
/// tone co-vary in photographs.
pub fn three_class_standin(n_train: usize, n_test: usize, size: u32, seed: u64) -> SyntheticSplit {
    use TopologyGroup::*;
    let mix: [&[(TopologyGroup, f64)]; 3] = [
        &[(European, 0.6), (Asian, 0.3), (NativeAmerican, 0.1)],
        &[(SouthAsian, 0.4), (PacificIslander, 0.3), (NativeAmerican, 0.2), (Asian, 0.1)],
        &[(African, 0.8), (SouthAsian, 0.1), (PacificIslander, 0.1)],
    ];
    let ranges: [(f64, f64); 3] = [(1.0, 3.4), (3.6, 7.4), (7.6, 10.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let light = Normal::new(1.0f64, 0.2).expect("valid normal");
    let mut draw = |i: usize| {
        let class = i % 3;
        let group = mix[class].choose_weighted(&mut rng, |(_, w)| *w).unwrap().0;
        let (lo, hi) = ranges[class];
        let age = *AgeGroup::ALL.choose(&mut rng).unwrap();
        let spec = FaceSpec {
            group,
            gender: *PromptGender::ALL.choose(&mut rng).unwrap(),
            body: *BodyShape::ALL.choose(&mut rng).unwrap(),
            age,
            tone: rng.random_range(lo..=hi),
            illumination: light.sample(&mut rng).clamp(0.6, 1.4),
            side_light: rng.random_range(-0.25..=0.25),
            background: *BACKGROUNDS.choose(&mut rng).unwrap(),
            hair: if age == AgeGroup::Senior { SILVER_HAIR } else { *DARK_HAIR.choose(&mut rng).unwrap() },
            clothes: *CLOTHES.choose(&mut rng).unwrap(),
            noise: 5,
            detail_seed: rng.random(),
            size,
        };
        SyntheticSample {
            image: render_face(&spec),
            spec,
            scale: SkinToneScale::new(class as u8 + 1, 3).expect("class in range"),
        }
    };
    let train = (0..n_train).map(&mut draw).collect();
    let test = (0..n_test).map(&mut draw).collect();
    SyntheticSplit { train, test }
}

/// Monk-labeled corpus rendered by the mock backend from the topology
/// training prompts. `per_group` images per group and split.
pub fn topology_corpus(per_group_train: usize, per_group_test: usize, config: &MockConfig) -> SyntheticSplit {
    prompt_corpus(&crate::topology::PromptVariations::full(), per_group_train, per_group_test, config)
}

/// Like [`topology_corpus`] without the environment clause, so every image is
/// rendered under natural light.
pub fn monk_corpus(per_group_train: usize, per_group_test: usize, config: &MockConfig) -> SyntheticSplit {
    let variations = crate::topology::PromptVariations { environment: Vec::new(), ..crate::topology::PromptVariations::full() };
    prompt_corpus(&variations, per_group_train, per_group_test, config)
}

fn prompt_corpus(
    variations: &crate::topology::PromptVariations,
    per_group_train: usize,
    per_group_test: usize,
    config: &MockConfig,
) -> SyntheticSplit {
    use crate::topology::build_training_prompts;
    let prompts = build_training_prompts(&TopologyGroup::ALL, variations);
    let mut split = SyntheticSplit { train: Vec::new(), test: Vec::new() };
    for group in TopologyGroup::ALL {
        let mine: Vec<_> = prompts.iter().filter(|p| p.group == group).collect();
        for i in 0..per_group_train + per_group_test {
            let prompt = mine[i % mine.len()];
            let seed = (i / mine.len()) as u64 + if i < per_group_train { 0 } else { 1_000_000 };
            let (image, spec) = mock_image(&prompt.text, seed, config);
            let scale = SkinToneScale::new(spec.tone.round() as u8, 10).expect("monk scale");
            let sample = SyntheticSample { image, spec, scale };
            if i < per_group_train {
                split.train.push(sample);
            } else {
                split.test.push(sample);
            }
        }
    }
    split
}
