//! Run configuration and the pipeline stages behind each CLI command.
//!
//! Every stage reads its inputs from the run directory, validates them before
//! doing any work and writes its outputs atomically, so a rerun either skips
//! finished work or regenerates identical files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{baseline_classify, detect_face, SkinBlobDetector, SkinPriors};
use crate::dataset::{write_synthetic, Dataset, DatasetError, DatasetRecord, Split};
use crate::fairness::{evaluate_model, FairnessConfig, FairnessError, FairnessReport};
use crate::generation::{generate, manifest_path, GenerationError, GenerationSummary, ModelSpec, RetryPolicy};
use crate::labeling::{
    analyze_face, label_batch, read_labels, BatchSummary, DemographicLabel, Gender, GenderTrainConfig, LabelError,
    LabelModels, SkinToneStack, ThumbnailGenderClassifier,
};
use crate::prompts::{build_suite, read_suite, suite_to_jsonl, PromptError, PromptSpec, SuiteConfig, TermLists};
use crate::report::{write_report, ReportError, ReportFiles};
use crate::scale::{ScalePalette, SkinToneScale};
use crate::skintone::{
    fuse_and_classify, ordinal_metrics, train_fusion, FusionConfig, FusionModel, FusionSample, OrdinalMetrics,
    SkinToneError,
};
use crate::synth::{monk_corpus, three_class_standin, topology_corpus, MockConfig};
use crate::topology::{train_topology, TopologyConfig, TopologyError, TopologyModel, TopologySample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("missing {what}: {path}")]
    MissingInput { what: &'static str, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    SkinTone(#[from] SkinToneError),
}

impl PipelineError {
    /// Short machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::Invalid(_) => "invalid",
            Self::MissingInput { .. } => "missing_input",
            Self::Io { .. } => "io",
            Self::Generation(GenerationError::BackendUnreachable { .. }) => "backend_unreachable",
            Self::Generation(GenerationError::QuotaExceeded { .. }) => "quota_exceeded",
            Self::Generation(_) => "generation",
            Self::Label(_) => "label",
            Self::Prompt(_) => "prompts",
            Self::Fairness(_) => "fairness",
            Self::Report(_) => "report",
            Self::Dataset(_) => "dataset",
            Self::Topology(_) => "topology",
            Self::SkinTone(_) => "skintone",
        }
    }

    /// The file the error is about, when there is one.
    pub fn path(&self) -> Option<&Path> {
        match self {
            Self::Config { path, .. } | Self::MissingInput { path, .. } | Self::Io { path, .. } => Some(path),
            Self::Generation(GenerationError::Io { path, .. } | GenerationError::BadManifest { path, .. }) => Some(path),
            Self::Dataset(DatasetError::Io { path, .. } | DatasetError::BadImage { path, .. }) => Some(path),
            Self::Label(LabelError::ManifestNotFound(path)) => Some(path),
            _ => None,
        }
    }

    /// 2 for invalid input, 3 for backend failures, 4 for a halted run with
    /// partial output, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Generation(GenerationError::BackendUnreachable { .. }) => 3,
            Self::Generation(GenerationError::QuotaExceeded { .. }) => 4,
            Self::Config { .. }
            | Self::Invalid(_)
            | Self::MissingInput { .. }
            | Self::Prompt(_)
            | Self::Generation(GenerationError::InvalidSpec(_) | GenerationError::BadManifest { .. })
            | Self::Label(LabelError::ManifestNotFound(_) | LabelError::BadManifest { .. })
            | Self::Dataset(DatasetError::BadLabels { .. })
            | Self::Fairness(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn require(path: &Path, what: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput { what, path: path.to_path_buf() })
    }
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointPaths {
    pub topology: Option<PathBuf>,
    pub fusion: Option<PathBuf>,
    pub gender: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkinToneCorpus {
    /// Monk-labeled mock renders under natural light; produces the 10-point
    /// labeling model.
    #[default]
    Monk,
    /// Three-class stand-in with strong illumination variation.
    ThreeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub topology_dataset: Option<PathBuf>,
    pub skintone_dataset: Option<PathBuf>,
    /// Render a synthetic corpus when the dataset directory has no labels.
    pub synthesize: bool,
    pub per_group_train: usize,
    pub per_group_test: usize,
    pub image_size: u32,
    pub skintone_corpus: SkinToneCorpus,
    pub three_class_train: usize,
    pub three_class_test: usize,
    pub topology: TopologyConfig,
    pub fusion: FusionConfig,
    pub gender: GenderTrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            topology_dataset: None,
            skintone_dataset: None,
            synthesize: true,
            per_group_train: 200,
            per_group_test: 40,
            image_size: 256,
            skintone_corpus: SkinToneCorpus::Monk,
            three_class_train: 1166,
            three_class_test: 292,
            topology: TopologyConfig::default(),
            fusion: FusionConfig::default(),
            gender: GenderTrainConfig::default(),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}
fn default_parallelism() -> usize {
    4
}

/// Parsed from TOML. Relative paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Overrides every training seed and each model's `seed0` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Prompt suite; defaults to `<out>/prompts.jsonl`.
    #[serde(default)]
    pub suite: Option<PathBuf>,
    /// Term list for `prompts build`; the bundled list when absent.
    #[serde(default)]
    pub terms: Option<PathBuf>,
    #[serde(default)]
    pub suffix: Option<String>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
    #[serde(default)]
    pub fairness: FairnessConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            seed: None,
            parallelism: default_parallelism(),
            suite: None,
            terms: None,
            suffix: None,
            models: Vec::new(),
            checkpoints: CheckpointPaths::default(),
            fairness: FairnessConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text)
            .map_err(|e| PipelineError::Config { path: base.to_path_buf(), reason: e.to_string() })?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        require(path, "config file")?;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| PipelineError::Config { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.out);
        for p in [
            &mut self.suite,
            &mut self.terms,
            &mut self.checkpoints.topology,
            &mut self.checkpoints.fusion,
            &mut self.checkpoints.gender,
            &mut self.training.topology_dataset,
            &mut self.training.skintone_dataset,
        ]
        .into_iter()
        .flatten()
        {
            abs(p);
        }
    }

    /// Applies `--seed` style overrides.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.training.topology.seed = seed;
            self.training.fusion.seed = seed;
            self.training.gender.seed = seed;
            for m in &mut self.models {
                m.seed0 = seed;
            }
        }
    }

    pub fn validate(&mut self) -> Result<(), PipelineError> {
        self.apply_seed();
        if self.parallelism == 0 {
            return Err(PipelineError::Invalid("parallelism must be at least 1".into()));
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            m.validate()?;
            if !ids.insert(m.id.as_str()) {
                return Err(PipelineError::Invalid(format!("duplicate model id {}", m.id)));
            }
        }
        self.fairness.validate()?;
        if let Some(t) = &self.terms {
            require(t, "term list")?;
        }
        let t = &self.training;
        if t.per_group_train == 0 || t.three_class_train == 0 {
            return Err(PipelineError::Invalid("training sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.fusion.alpha) || t.fusion.alpha <= 0.0 {
            return Err(PipelineError::Invalid(format!("fusion alpha {} outside (0, 1)", t.fusion.alpha)));
        }
        Ok(())
    }

    pub fn suite_path(&self) -> PathBuf {
        self.suite.clone().unwrap_or_else(|| self.out.join("prompts.jsonl"))
    }

    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn topology_path(&self) -> PathBuf {
        self.checkpoints.topology.clone().unwrap_or_else(|| self.models_dir().join("topology.ckpt"))
    }

    pub fn fusion_path(&self) -> PathBuf {
        self.checkpoints.fusion.clone().unwrap_or_else(|| self.models_dir().join("fusion.ckpt"))
    }

    pub fn gender_path(&self) -> PathBuf {
        self.checkpoints.gender.clone().unwrap_or_else(|| self.models_dir().join("gender.ckpt"))
    }

    pub fn labels_path(&self, model_id: &str) -> PathBuf {
        self.out.join(model_id).join("labels.jsonl")
    }

    pub fn evaluation_path(&self) -> PathBuf {
        self.out.join("evaluation.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    fn topology_dataset(&self) -> PathBuf {
        self.training.topology_dataset.clone().unwrap_or_else(|| self.out.join("datasets").join("topology"))
    }

    fn skintone_dataset(&self) -> PathBuf {
        self.training.skintone_dataset.clone().unwrap_or_else(|| {
            let name = match self.training.skintone_corpus {
                SkinToneCorpus::Monk => "monk",
                SkinToneCorpus::ThreeClass => "three-class",
            };
            self.out.join("datasets").join(name)
        })
    }

    fn model(&self, id: &str) -> Result<&ModelSpec, PipelineError> {
        self.models
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| PipelineError::Invalid(format!("no model {id:?} in the config")))
    }
}

/// Builds the prompt suite and writes it as JSONL.
pub fn build_prompts(cfg: &RunConfig) -> Result<(PathBuf, usize), PipelineError> {
    let terms = match &cfg.terms {
        Some(p) => TermLists::load(p)?,
        None => TermLists::default_terms(),
    };
    let mut sc = SuiteConfig::default();
    if let Some(s) = &cfg.suffix {
        sc.suffix = s.clone();
    }
    let suite = build_suite(&terms, &sc)?;
    let path = cfg.suite_path();
    write_atomic(&path, suite_to_jsonl(&suite).as_bytes())?;
    Ok((path, suite.len()))
}

fn load_suite(cfg: &RunConfig) -> Result<Vec<PromptSpec>, PipelineError> {
    let path = cfg.suite_path();
    require(&path, "prompt suite")?;
    Ok(read_suite(&path)?)
}

/// Generates images for one model, or all configured models.
pub fn generate_stage(
    cfg: &RunConfig,
    model: Option<&str>,
    retry: RetryPolicy,
) -> Result<Vec<(String, GenerationSummary)>, PipelineError> {
    let suite = load_suite(cfg)?;
    let specs: Vec<&ModelSpec> = match model {
        Some(id) => vec![cfg.model(id)?],
        None => cfg.models.iter().collect(),
    };
    if specs.is_empty() {
        return Err(PipelineError::Invalid("no models configured".into()));
    }
    let mut out = Vec::new();
    for spec in specs {
        let backend = spec.backend()?;
        out.push((spec.id.clone(), generate(&suite, spec, &cfg.out, backend.as_ref(), retry)?));
    }
    Ok(out)
}

fn palette_for(num_scales: u8) -> Result<ScalePalette, PipelineError> {
    match num_scales {
        10 => Ok(ScalePalette::monk()),
        3 => Ok(ScalePalette::three_class()),
        n => Err(PipelineError::Invalid(format!("no built-in palette for {n} scales"))),
    }
}

/// Loads the three checkpoints used for labeling.
pub fn load_label_models(cfg: &RunConfig) -> Result<LabelModels, PipelineError> {
    let (tp, fp, gp) = (cfg.topology_path(), cfg.fusion_path(), cfg.gender_path());
    require(&tp, "topology checkpoint")?;
    require(&fp, "fusion checkpoint")?;
    require(&gp, "gender checkpoint")?;
    let topology = TopologyModel::load(&tp)?;
    let fusion = FusionModel::load(&fp)?;
    let gender = ThumbnailGenderClassifier::load(&gp)?;
    if fusion.latent_dim() != topology.latent_dim() {
        return Err(PipelineError::Invalid(format!(
            "fusion expects a {}-d latent, topology produces {}",
            fusion.latent_dim(),
            topology.latent_dim()
        )));
    }
    let palette = palette_for(fusion.num_scales() as u8)?;
    Ok(LabelModels { gender: Box::new(gender), skintone: SkinToneStack::new(topology, fusion, palette) })
}

/// Labels every configured model's generated images.
pub fn label_stage(cfg: &RunConfig) -> Result<Vec<(String, BatchSummary)>, PipelineError> {
    if cfg.models.is_empty() {
        return Err(PipelineError::Invalid("no models configured".into()));
    }
    for m in &cfg.models {
        require(&manifest_path(&cfg.out, &m.id), "generation manifest")?;
    }
    let models = load_label_models(cfg)?;
    let mut out = Vec::new();
    for m in &cfg.models {
        let s = label_batch(&manifest_path(&cfg.out, &m.id), &cfg.labels_path(&m.id), &models, cfg.parallelism)?;
        out.push((m.id.clone(), s));
    }
    Ok(out)
}

/// Latest label per image; older entries from superseded model versions are
/// dropped.
fn latest_labels(labels: Vec<DemographicLabel>) -> Vec<DemographicLabel> {
    let mut by_path: BTreeMap<String, DemographicLabel> = BTreeMap::new();
    for l in labels {
        by_path.insert(l.image_path.clone(), l);
    }
    by_path.into_values().collect()
}

/// Scores every model and writes `evaluation.json`.
pub fn evaluate_stage(cfg: &RunConfig) -> Result<Vec<FairnessReport>, PipelineError> {
    if cfg.models.is_empty() {
        return Err(PipelineError::Invalid("no models configured".into()));
    }
    let suite = load_suite(cfg)?;
    for m in &cfg.models {
        require(&cfg.labels_path(&m.id), "label file")?;
    }
    let mut reports = Vec::new();
    for m in &cfg.models {
        let labels = latest_labels(read_labels(&cfg.labels_path(&m.id))?);
        reports.push(evaluate_model(&m.id, &labels, &suite, &cfg.fairness)?);
    }
    let body = serde_json::to_vec_pretty(&reports).expect("reports serialize");
    write_atomic(&cfg.evaluation_path(), &body)?;
    Ok(reports)
}

/// Renders tables and plots from `evaluation.json`.
pub fn report_stage(cfg: &RunConfig) -> Result<ReportFiles, PipelineError> {
    let path = cfg.evaluation_path();
    require(&path, "evaluation results")?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let reports: Vec<FairnessReport> = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Config { path: path.clone(), reason: e.to_string() })?;
    Ok(write_report(&reports, &cfg.report_dir(), cfg.fairness.bias_threshold, cfg.fairness.alignment_threshold)?)
}

fn has_labels(root: &Path) -> bool {
    root.join(crate::dataset::LABELS_FILE).exists()
}

fn mock_for_training(cfg: &RunConfig) -> MockConfig {
    MockConfig { size: cfg.training.image_size, ..MockConfig::default() }
}

fn ensure_topology_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let root = cfg.topology_dataset();
    if !has_labels(&root) {
        if !cfg.training.synthesize {
            return Err(PipelineError::MissingInput { what: "topology dataset", path: root });
        }
        let t = &cfg.training;
        let split = topology_corpus(t.per_group_train, t.per_group_test, &mock_for_training(cfg));
        write_synthetic(&root, &split, 10)?;
    }
    Ok(Dataset::load(&root)?)
}

fn ensure_skintone_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let root = cfg.skintone_dataset();
    if !has_labels(&root) {
        if !cfg.training.synthesize {
            return Err(PipelineError::MissingInput { what: "skintone dataset", path: root });
        }
        let t = &cfg.training;
        let (split, n) = match t.skintone_corpus {
            SkinToneCorpus::Monk => (monk_corpus(t.per_group_train, t.per_group_test, &mock_for_training(cfg)), 10),
            SkinToneCorpus::ThreeClass => {
                (three_class_standin(t.three_class_train, t.three_class_test, t.image_size, cfg.seed.unwrap_or(5)), 3)
            }
        };
        write_synthetic(&root, &split, n)?;
    }
    Ok(Dataset::load(&root)?)
}

/// Applies `f` to every item on up to `threads` workers, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub gender_train_accuracy: f64,
    pub topology_checkpoint: PathBuf,
    pub gender_checkpoint: PathBuf,
}

/// Trains the topology network and the thumbnail gender classifier on the
/// topology corpus.
pub fn train_topology_stage(cfg: &RunConfig) -> Result<TopologySummary, PipelineError> {
    let ds = ensure_topology_dataset(cfg)?;
    let load = |r: &DatasetRecord| -> Result<(TopologySample, Option<(image::RgbImage, Gender)>), PipelineError> {
        let img = ds.image(r)?;
        let group = r
            .topology_group
            .ok_or_else(|| PipelineError::Invalid(format!("{} has no topology group", r.path)))?;
        let crop = detect_face(&img).map_err(|e| PipelineError::Invalid(format!("{}: {e}", r.path)))?.crop;
        let g = r.gender.filter(|g| *g != Gender::Unknown).map(|g| (img, g));
        Ok((TopologySample { crop, group }, g))
    };
    let collect = |split| -> Result<Vec<_>, PipelineError> {
        let recs: Vec<&DatasetRecord> = ds.split(split).collect();
        par_map(&recs, cfg.parallelism, |r| load(r)).into_iter().collect()
    };
    let train = collect(Split::Train)?;
    let test = collect(Split::Test)?;
    let (train_s, gender_s): (Vec<_>, Vec<_>) = train.into_iter().unzip();
    let test_s: Vec<_> = test.into_iter().map(|t| t.0).collect();
    let model = train_topology(&train_s, &test_s, &cfg.training.topology)?;
    let gender_samples: Vec<_> = gender_s.into_iter().flatten().collect();
    let gender = ThumbnailGenderClassifier::train(&gender_samples, &cfg.training.gender)?;
    let (tp, gp) = (cfg.topology_path(), cfg.gender_path());
    for p in [&tp, &gp] {
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).map_err(io_err(d))?;
        }
    }
    model.save(&tp)?;
    gender.save(&gp)?;
    Ok(TopologySummary {
        train_samples: train_s.len(),
        test_samples: test_s.len(),
        train_accuracy: model.meta.train_accuracy,
        test_accuracy: model.meta.test_accuracy,
        epochs_run: model.meta.epochs_run,
        gender_train_accuracy: gender.train_accuracy,
        topology_checkpoint: tp,
        gender_checkpoint: gp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinToneSummary {
    pub num_scales: u8,
    pub train_samples: usize,
    pub test_samples: usize,
    pub fusion: Option<OrdinalMetrics>,
    pub baseline: Option<OrdinalMetrics>,
    pub warnings: Vec<String>,
    pub checkpoint: PathBuf,
}

struct Prepared {
    sample: FusionSample,
    baseline: Option<SkinToneScale>,
    label: SkinToneScale,
}

fn prepare(
    ds: &Dataset,
    records: &[&DatasetRecord],
    topology: &TopologyModel,
    palette: &ScalePalette,
    k: usize,
    parallelism: usize,
) -> Result<Vec<Prepared>, PipelineError> {
    let detector = SkinBlobDetector::default();
    let priors = SkinPriors::default();
    let n = palette.len() as u8;
    par_map(records, parallelism, |r| {
        let img = ds.image(r)?;
        let idx = r.skintone_scale.ok_or_else(|| PipelineError::Invalid(format!("{} has no skintone label", r.path)))?;
        let label = SkinToneScale::new(idx, n).map_err(|e| PipelineError::Invalid(format!("{}: {e}", r.path)))?;
        let a = analyze_face(&img, &detector, &priors, palette, k, topology).map_err(PipelineError::Invalid)?;
        let mut sample = FusionSample::new(&a.features, &a.distribution, Some(label));
        sample.group = r.topology_group.map(|g| g.index());
        let baseline = baseline_classify(&a.face, palette, &priors).ok();
        Ok(Prepared { sample, baseline, label })
    })
    .into_iter()
    .collect()
}

/// Trains the fusion head on top of the saved topology network and scores it
/// against the color-only baseline on the test split.
pub fn train_skintone_stage(cfg: &RunConfig) -> Result<SkinToneSummary, PipelineError> {
    let tp = cfg.topology_path();
    require(&tp, "topology checkpoint")?;
    let topology = TopologyModel::load(&tp)?;
    let ds = ensure_skintone_dataset(cfg)?;
    let num_scales = ds
        .records
        .iter()
        .find_map(|r| r.num_scales)
        .ok_or_else(|| PipelineError::Invalid("dataset records carry no scale size".into()))?;
    let palette = palette_for(num_scales)?;
    let mut fc = cfg.training.fusion.clone();
    fc.num_scales = num_scales;
    let k = crate::color::DEFAULT_K;
    let train_r: Vec<_> = ds.split(Split::Train).collect();
    let test_r: Vec<_> = ds.split(Split::Test).collect();
    let train = prepare(&ds, &train_r, &topology, &palette, k, cfg.parallelism)?;
    let test = prepare(&ds, &test_r, &topology, &palette, k, cfg.parallelism)?;
    let samples: Vec<FusionSample> = train.iter().map(|p| p.sample.clone()).collect();
    let model = train_fusion(&samples, &topology, &fc)?;
    let fp = cfg.fusion_path();
    if let Some(d) = fp.parent() {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    model.save(&fp)?;
    let (mut fusion, mut baseline) = (None, None);
    if !test.is_empty() {
        let labels: Vec<_> = test.iter().map(|p| p.label).collect();
        let preds = test
            .iter()
            .map(|p| {
                let f = crate::topology::TopologyFeatures {
                    latent: p.sample.latent.clone(),
                    logits: p.sample.topo_logits.clone().try_into().expect("6 logits"),
                };
                let d = crate::color::PixelDistribution {
                    weights: p.sample.distribution.clone(),
                    dominant: Vec::new(),
                    fallback: false,
                };
                fuse_and_classify(&model, &f, &d).map(|s| s.scale)
            })
            .collect::<Result<Vec<_>, _>>()?;
        fusion = Some(ordinal_metrics(&preds, &labels, fc.tolerance, num_scales)?);
        let fallback = SkinToneScale::new(num_scales.div_ceil(2), num_scales).expect("middle scale");
        let base: Vec<_> = test.iter().map(|p| p.baseline.unwrap_or(fallback)).collect();
        baseline = Some(ordinal_metrics(&base, &labels, fc.tolerance, num_scales)?);
    }
    Ok(SkinToneSummary {
        num_scales,
        train_samples: train.len(),
        test_samples: test.len(),
        fusion,
        baseline,
        warnings: model.meta.warnings.clone(),
        checkpoint: fp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_resolves_relative_paths() {
        let cfg = RunConfig::parse(
            r#"
out = "runs/a"
seed = 9
[[models]]
id = "mock"
backend = "mock"
images_per_prompt = 2
[models.mock]
male_fraction = 0.7
fixed_scale = 9
[checkpoints]
topology = "/abs/topo.ckpt"
[fairness]
bias_threshold = 0.25
[training.topology]
max_epochs = 3
"#,
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(cfg.out, PathBuf::from("/cfg/runs/a"));
        assert_eq!(cfg.topology_path(), PathBuf::from("/abs/topo.ckpt"));
        assert_eq!(cfg.fusion_path(), PathBuf::from("/cfg/runs/a/models/fusion.ckpt"));
        assert_eq!(cfg.fairness.bias_threshold, 0.25);
        assert_eq!(cfg.fairness.parity_epsilon, 0.2);
        assert_eq!(cfg.training.topology.max_epochs, 3);
        let mut cfg = cfg;
        cfg.validate().unwrap();
        assert_eq!(cfg.models[0].seed0, 9);
        assert_eq!(cfg.models[0].mock.male_fraction, 0.7);
        assert_eq!(cfg.models[0].mock.fixed_scale, Some(9));
        assert_eq!(cfg.models[0].mock.cycle, 10);
        assert_eq!(cfg.training.topology.seed, 9);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(matches!(RunConfig::parse("bogus = 1", Path::new(".")), Err(PipelineError::Config { .. })));
        let mut dup = RunConfig::parse(
            "[[models]]\nid = \"m\"\nbackend = \"mock\"\n[[models]]\nid = \"m\"\nbackend = \"mock\"\n",
            Path::new("."),
        )
        .unwrap();
        assert!(matches!(dup.validate(), Err(PipelineError::Invalid(_))));
        let mut thr = RunConfig::parse("[fairness]\nbias_threshold = 1.5\n", Path::new(".")).unwrap();
        assert_eq!(thr.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_inputs_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { out: dir.path().to_path_buf(), models: vec![ModelSpec::mock("m", 1)], ..Default::default() };
        cfg.validate().unwrap();
        build_prompts(&cfg).unwrap();
        let err = evaluate_stage(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(err.path(), Some(cfg.labels_path("m").as_path()));
        assert!(matches!(report_stage(&cfg), Err(PipelineError::MissingInput { .. })));
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
