//! Per-image demographic labels: gender expression through a pluggable
//! classifier, skintone through the color + topology fusion stack.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, Tensor};
use crate::color::convert::rgb_to_hsv;
use crate::color::{
    detect_face_with, dominant_pixels, segment_skin_with, ColorError, FaceDetector, FaceRegion, PixelDistribution,
    SkinBlobDetector, SkinPriors, DEFAULT_K,
};
use crate::nn::{Adam, AdamConfig};
use crate::scale::{ScalePalette, SkinToneGroup};
use crate::skintone::{fuse_and_classify, FusionModel, SkinTonePrediction};
use crate::topology::{extract_features, TopologyFeatures, TopologyModel};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("manifest not found: {0}")]
    ManifestNotFound(PathBuf),
    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid gender metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    /// The resolved values, in report order.
    pub const RESOLVED: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn name(self) -> &'static str {
        match self {
            Self::Male => "Male",
            Self::Female => "Female",
            Self::Unknown => "Unknown",
        }
    }

    /// Annotation word used in prompts.
    pub fn word(self) -> Option<&'static str> {
        match self {
            Self::Male => Some("male"),
            Self::Female => Some("female"),
            Self::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderLabel {
    pub value: Gender,
    pub confidence: f64,
}

impl GenderLabel {
    /// Applies the confidence floor: below it the value becomes Unknown.
    pub fn with_floor(value: Gender, confidence: f64, floor: f64) -> Self {
        let value = if confidence < floor { Gender::Unknown } else { value };
        Self { value, confidence }
    }
}

/// Gender-expression classifier slot. Implementations must be deterministic
/// for a given version and image.
pub trait GenderClassifierPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> String;
    fn predict(&self, image: &RgbImage) -> GenderLabel;
}

pub const DEFAULT_GENDER_FLOOR: f64 = 0.6;
const THUMB: u32 = 32;
const THUMB_FEATURES: usize = (THUMB * THUMB * 4) as usize;

/// Whole-image thumbnail features: RGB and HSV saturation at 32x32, in [0, 1].
pub fn thumbnail_features(image: &RgbImage) -> Vec<f64> {
    let small = imageops::resize(image, THUMB, THUMB, FilterType::Triangle);
    let mut out = Vec::with_capacity(THUMB_FEATURES);
    for p in small.pixels() {
        let s = rgb_to_hsv(p.0)[1];
        out.extend([p.0[0], p.0[1], p.0[2], s].map(|v| f64::from(v) / 255.0));
    }
    out
}

/// Bundled low-accuracy fallback: logistic regression on thumbnail features,
/// trained on synthetic faces. Replace with a real classifier for audits of
/// photographic output.
#[derive(Debug, Clone, PartialEq)]
pub struct ThumbnailGenderClassifier {
    weights: Vec<f64>,
    bias: f64,
    pub floor: f64,
    pub train_accuracy: f64,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GenderTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, learning_rate: 1e-2, l2: 1e-4, floor: DEFAULT_GENDER_FLOOR, seed: 3 }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ThumbnailGenderClassifier {
    const ARCH: &'static str = "logistic(thumbnail 32x32 rgb+s -> male)";

    fn tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::f64("weights", &[THUMB_FEATURES], &self.weights),
            Tensor::f64("bias", &[1], &[self.bias]),
        ]
    }

    fn refresh_version(&mut self) {
        self.version = crate::checkpoint::weights_version(Self::ARCH, &self.tensors());
    }

    /// Probability that the figure is male.
    pub fn male_probability(&self, image: &RgbImage) -> f64 {
        let x = thumbnail_features(image);
        sigmoid(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias)
    }

    pub fn train(samples: &[(RgbImage, Gender)], config: &GenderTrainConfig) -> Result<Self, LabelError> {
        let data: Vec<(Vec<f64>, f64)> = samples
            .iter()
            .filter(|(_, g)| *g != Gender::Unknown)
            .map(|(img, g)| (thumbnail_features(img), if *g == Gender::Male { 1.0 } else { 0.0 }))
            .collect();
        let males = data.iter().filter(|d| d.1 == 1.0).count();
        if males == 0 || males == data.len() {
            return Err(LabelError::InsufficientData("gender training needs both classes".into()));
        }
        let mut model = Self {
            weights: vec![0.0; THUMB_FEATURES],
            bias: 0.0,
            floor: config.floor,
            train_accuracy: 0.0,
            version: String::new(),
        };
        let mut opt = Adam::new(
            AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() },
            &[THUMB_FEATURES, 1],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size.max(1)) {
                let mut gw = vec![0.0; THUMB_FEATURES];
                let mut gb = 0.0;
                let inv = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (x, y) = &data[i];
                    let z: f64 = x.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>() + model.bias;
                    let d = (sigmoid(z) - y) * inv;
                    for (g, xv) in gw.iter_mut().zip(x) {
                        *g += d * xv;
                    }
                    gb += d;
                }
                for (g, w) in gw.iter_mut().zip(&model.weights) {
                    *g += config.l2 * w;
                }
                let gb = [gb];
                let mut bias = [model.bias];
                opt.update(&mut [&mut model.weights, &mut bias], &[&gw, &gb]);
                model.bias = bias[0];
            }
        }
        let hits = data
            .iter()
            .filter(|(x, y)| {
                let z: f64 = x.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>() + model.bias;
                (sigmoid(z) >= 0.5) == (*y == 1.0)
            })
            .count();
        model.train_accuracy = hits as f64 / data.len() as f64;
        model.refresh_version();
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "floor": self.floor, "train_accuracy": self.train_accuracy });
        Checkpoint::new("gender", Self::ARCH, meta, self.tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, LabelError> {
        ck.expect_kind("gender")?;
        let meta = &ck.header.metadata;
        let mut m = Self {
            weights: ck.take_f64("weights", &[THUMB_FEATURES])?,
            bias: ck.take_f64("bias", &[1])?[0],
            floor: meta["floor"].as_f64().unwrap_or(DEFAULT_GENDER_FLOOR),
            train_accuracy: meta["train_accuracy"].as_f64().unwrap_or(0.0),
            version: String::new(),
        };
        m.refresh_version();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl GenderClassifierPlugin for ThumbnailGenderClassifier {
    fn name(&self) -> &str {
        "thumbnail-logistic"
    }

    fn version(&self) -> String {
        self.version.clone()
    }

    fn predict(&self, image: &RgbImage) -> GenderLabel {
        let p = self.male_probability(image);
        let (value, conf) = if p >= 0.5 { (Gender::Male, p) } else { (Gender::Female, 1.0 - p) };
        GenderLabel::with_floor(value, conf, self.floor)
    }
}

/// Everything the skintone branch needs.
pub struct SkinToneStack {
    pub detector: Box<dyn FaceDetector>,
    pub priors: SkinPriors,
    pub palette: ScalePalette,
    pub k: usize,
    pub topology: TopologyModel,
    pub fusion: FusionModel,
}

/// Intermediate products of the color and topology branches for one image.
#[derive(Debug, Clone)]
pub struct FaceAnalysis {
    pub face: FaceRegion,
    pub distribution: PixelDistribution,
    pub features: TopologyFeatures,
    pub notes: Vec<String>,
}

/// Runs detection, segmentation, dominant-pixel extraction and topology
/// feature extraction. A face without skin pixels yields the uniform
/// distribution and a note.
pub fn analyze_face(
    image: &RgbImage,
    detector: &dyn FaceDetector,
    priors: &SkinPriors,
    palette: &ScalePalette,
    k: usize,
    topology: &TopologyModel,
) -> Result<FaceAnalysis, String> {
    let face = detect_face_with(detector, image).map_err(|e| format!("face detection: {e}"))?;
    let mut notes = Vec::new();
    let mask = segment_skin_with(&face, priors);
    let distribution = match dominant_pixels(&face, &mask, k, palette) {
        Ok(d) => d,
        Err(ColorError::NoSkinPixels) => {
            notes.push("no skin pixels; uniform pixel distribution used".to_string());
            PixelDistribution::uniform(palette.len())
        }
        Err(e) => return Err(format!("dominant pixels: {e}")),
    };
    let features = extract_features(topology, &face.crop).map_err(|e| format!("topology features: {e}"))?;
    Ok(FaceAnalysis { face, distribution, features, notes })
}

impl SkinToneStack {
    pub fn new(topology: TopologyModel, fusion: FusionModel, palette: ScalePalette) -> Self {
        Self {
            detector: Box::new(SkinBlobDetector::default()),
            priors: SkinPriors::default(),
            palette,
            k: DEFAULT_K,
            topology,
            fusion,
        }
    }

    pub fn analyze(&self, image: &RgbImage) -> Result<FaceAnalysis, String> {
        analyze_face(image, self.detector.as_ref(), &self.priors, &self.palette, self.k, &self.topology)
    }

    pub fn classify(&self, analysis: &FaceAnalysis) -> Result<SkinTonePrediction, String> {
        fuse_and_classify(&self.fusion, &analysis.features, &analysis.distribution).map_err(|e| format!("fusion: {e}"))
    }
}

/// Models used for labeling. Read-only and shared across workers.
pub struct LabelModels {
    pub gender: Box<dyn GenderClassifierPlugin>,
    pub skintone: SkinToneStack,
}

impl LabelModels {
    pub fn versions(&self) -> BTreeMap<String, String> {
        let mut v = BTreeMap::new();
        v.insert("gender".into(), format!("{}@{}", self.gender.name(), self.gender.version()));
        v.insert("detector".into(), self.skintone.detector.name().to_string());
        v.insert("topology".into(), self.skintone.topology.version().to_string());
        v.insert("fusion".into(), self.skintone.fusion.version().to_string());
        v
    }
}

/// One labeled image. Serialized field names are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicLabel {
    pub image_path: String,
    pub prompt_id: String,
    pub gender: Gender,
    pub gender_conf: f64,
    pub skintone_scale: Option<u8>,
    /// Report group; present for 10-scale (Monk) models only.
    pub skintone_group: Option<SkinToneGroup>,
    pub skintone_conf: Option<f64>,
    pub fallback_face: bool,
    pub errors: Vec<String>,
    pub versions: BTreeMap<String, String>,
    #[serde(skip)]
    pub face_count: usize,
    #[serde(skip)]
    pub timestamp: Option<chrono::DateTime<chrono::Utc>>,
}

impl DemographicLabel {
    fn failed(image_path: &str, prompt_id: &str, versions: BTreeMap<String, String>, error: String) -> Self {
        Self {
            image_path: image_path.into(),
            prompt_id: prompt_id.into(),
            gender: Gender::Unknown,
            gender_conf: 0.0,
            skintone_scale: None,
            skintone_group: None,
            skintone_conf: None,
            fallback_face: false,
            errors: vec![error],
            versions,
            face_count: 0,
            timestamp: Some(chrono::Utc::now()),
        }
    }

    fn key(&self) -> (String, String) {
        (self.image_path.clone(), versions_key(&self.versions))
    }
}

fn versions_key(v: &BTreeMap<String, String>) -> String {
    v.iter().map(|(k, x)| format!("{k}={x}")).collect::<Vec<_>>().join(";")
}

/// Labels one decoded image. Branch failures leave that field unresolved and
/// add an error note; they never abort.
pub fn label_image(image: &RgbImage, image_path: &str, prompt_id: &str, models: &LabelModels) -> DemographicLabel {
    let versions = models.versions();
    let gender = models.gender.predict(image);
    let mut label = DemographicLabel {
        image_path: image_path.into(),
        prompt_id: prompt_id.into(),
        gender: gender.value,
        gender_conf: gender.confidence,
        skintone_scale: None,
        skintone_group: None,
        skintone_conf: None,
        fallback_face: false,
        errors: Vec::new(),
        versions,
        face_count: 0,
        timestamp: Some(chrono::Utc::now()),
    };
    match models.skintone.analyze(image) {
        Ok(analysis) => {
            label.fallback_face = analysis.face.fallback;
            label.face_count = analysis.face.face_count;
            label.errors.extend(analysis.notes.iter().cloned());
            match models.skintone.classify(&analysis) {
                Ok(pred) => {
                    label.skintone_scale = Some(pred.scale.index());
                    label.skintone_conf = Some(pred.confidence());
                    if models.skintone.fusion.num_scales() == 10 {
                        label.skintone_group = SkinToneGroup::from_monk(pred.scale).ok();
                    }
                }
                Err(e) => label.errors.push(e),
            }
        }
        Err(e) => label.errors.push(e),
    }
    label
}

/// Decodes and labels an image file.
pub fn label_image_file(path: &Path, prompt_id: &str, models: &LabelModels) -> Result<DemographicLabel, LabelError> {
    let image = image::open(path)
        .map_err(|e| LabelError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    Ok(label_image(&image, &path.to_string_lossy(), prompt_id, models))
}

/// Manifest line fields the labeler needs; other fields are ignored.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ManifestEntry {
    pub prompt_id: String,
    pub image_path: String,
    #[serde(default = "ok_status")]
    pub status: String,
}

fn ok_status() -> String {
    "ok".into()
}

/// Parses JSON lines. An unterminated last line that fails to parse is a torn
/// append and is skipped.
fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, LabelError> {
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if torn_tail && i + 1 == lines.len() => {}
            Err(e) => return Err(LabelError::BadManifest { line: i + 1, reason: e.to_string() }),
        }
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, LabelError> {
    let text = fs::read_to_string(path).map_err(|_| LabelError::ManifestNotFound(path.to_path_buf()))?;
    parse_jsonl(&text)
}

/// Reads a label JSONL file; a missing file is an empty set.
pub fn read_labels(path: &Path) -> Result<Vec<DemographicLabel>, LabelError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    parse_jsonl(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BatchSummary {
    pub labeled: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Labels every ok entry of a generation manifest into `out` (JSONL,
/// appended). Image paths are resolved against the manifest's directory.
/// Entries already labeled with the current model versions are skipped, so
/// reruns only fill gaps. Unreadable images produce an error record.
pub fn label_batch(
    manifest: &Path,
    out: &Path,
    models: &LabelModels,
    parallelism: usize,
) -> Result<BatchSummary, LabelError> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let current = versions_key(&models.versions());
    let done: HashSet<(String, String)> = read_labels(out)?.iter().map(DemographicLabel::key).collect();
    let mut summary = BatchSummary::default();
    let mut todo = Vec::new();
    let mut seen = HashSet::new();
    for e in entries.into_iter().filter(|e| e.status == "ok") {
        if done.contains(&(e.image_path.clone(), current.clone())) || !seen.insert(e.image_path.clone()) {
            summary.skipped += 1;
        } else {
            todo.push(e);
        }
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    crate::generation::drop_torn_tail(out)?;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(out)?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, (DemographicLabel, bool))>();
    let workers = parallelism.clamp(1, todo.len().max(1));
    std::thread::scope(|scope| -> Result<(), LabelError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next) = (&todo, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(e) = todo.get(i) else { break };
                let path = base.join(&e.image_path);
                let label = match image::open(&path) {
                    Ok(img) => (label_image(&img.to_rgb8(), &e.image_path, &e.prompt_id, models), false),
                    Err(err) => (
                        DemographicLabel::failed(
                            &e.image_path,
                            &e.prompt_id,
                            models.versions(),
                            format!("unreadable image: {err}"),
                        ),
                        true,
                    ),
                };
                if tx.send((i, label)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // written in manifest order so reruns produce identical files
        let mut order = crate::generation::InOrder::default();
        for (i, item) in rx {
            for (label, failed) in order.push(i, item) {
                if failed {
                    summary.failed += 1;
                } else {
                    summary.labeled += 1;
                }
                writeln!(file, "{}", serde_json::to_string(&label).expect("label serializes"))?;
            }
        }
        Ok(())
    })?;
    file.sync_all()?;
    Ok(summary)
}
