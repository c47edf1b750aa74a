//! Facial-topology network.
//!
//! Three 3x3 convolution blocks (ReLU, 2x2 max pool) over the 128x128 face
//! crop, then two fully connected layers. It is trained to tell apart six
//! broad geographic-origin groups on synthetic faces rendered under dim,
//! natural and bright light; the post-ReLU activations of the first fully
//! connected layer are the latent features handed to the fusion classifier.
//!
//! The groups only diversify the training faces. They are not biological
//! categories and are not used anywhere else in an audit.

use std::fmt;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, Tensor};
use crate::color::convert::shift_luma;
use crate::color::CROP_SIZE;
use crate::nn::{
    argmax, cross_entropy, maxpool2, maxpool2_backward, relu_backward, relu_inplace, softmax, Adam,
    AdamConfig, Conv3x3, Dense,
};

pub const NUM_GROUPS: usize = 6;
const INPUT: usize = CROP_SIZE as usize;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("input is {found_w}x{found_h}, model expects {INPUT}x{INPUT}")]
    ShapeMismatch { found_w: u32, found_h: u32 },
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid topology metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TopologyGroup {
    European,
    Asian,
    PacificIslander,
    African,
    SouthAsian,
    NativeAmerican,
}

impl TopologyGroup {
    pub const ALL: [TopologyGroup; NUM_GROUPS] = [
        TopologyGroup::European,
        TopologyGroup::Asian,
        TopologyGroup::PacificIslander,
        TopologyGroup::African,
        TopologyGroup::SouthAsian,
        TopologyGroup::NativeAmerican,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Phrase used in generation prompts, with its article.
    pub fn phrase(self) -> &'static str {
        match self {
            Self::European => "A European",
            Self::Asian => "An Asian",
            Self::PacificIslander => "A Pacific islander",
            Self::African => "An African",
            Self::SouthAsian => "A South Asian",
            Self::NativeAmerican => "A native American",
        }
    }

    /// Directory-safe identifier.
    pub fn slug(self) -> &'static str {
        match self {
            Self::European => "european",
            Self::Asian => "asian",
            Self::PacificIslander => "pacific_islander",
            Self::African => "african",
            Self::SouthAsian => "south_asian",
            Self::NativeAmerican => "native_american",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.slug() == s)
    }

    /// Finds the group named in a prompt, if any. "South Asian" is matched
    /// before "Asian".
    pub fn find_in(text: &str) -> Option<Self> {
        let lower = text.to_ascii_lowercase();
        [
            Self::SouthAsian,
            Self::NativeAmerican,
            Self::PacificIslander,
            Self::European,
            Self::African,
            Self::Asian,
        ]
        .into_iter()
        .find(|g| {
            let p = g.phrase().to_ascii_lowercase();
            let name = p.split_once(' ').map(|x| x.1).unwrap_or(&p).to_string();
            lower.contains(&name)
        })
    }
}

impl fmt::Display for TopologyGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

macro_rules! word_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            /// First variant whose word appears as a whole word in `text`.
            pub fn find_in(text: &str) -> Option<Self> {
                let words: Vec<String> = text
                    .split(|c: char| !c.is_ascii_alphanumeric())
                    .map(|w| w.to_ascii_lowercase())
                    .collect();
                Self::ALL.iter().copied().find(|v| words.iter().any(|w| w == v.word()))
            }
        }
    };
}

word_enum!(BodyShape { Thin => "thin", Average => "average", Large => "large" });
word_enum!(PromptGender { Male => "male", Female => "female" });
word_enum!(Environment { Dim => "dim", Natural => "natural", Bright => "bright" });
word_enum!(AgeGroup { Young => "young", Middle => "middle", Senior => "senior" });

/// Values swept when rendering topology training prompts. An empty list
/// drops that clause from the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariations {
    pub body: Vec<BodyShape>,
    pub gender: Vec<PromptGender>,
    pub environment: Vec<Environment>,
    pub age: Vec<AgeGroup>,
}

impl PromptVariations {
    pub fn full() -> Self {
        Self {
            body: BodyShape::ALL.to_vec(),
            gender: PromptGender::ALL.to_vec(),
            environment: Environment::ALL.to_vec(),
            age: AgeGroup::ALL.to_vec(),
        }
    }

    pub fn empty() -> Self {
        Self { body: vec![], gender: vec![], environment: vec![], age: vec![] }
    }
}

impl Default for PromptVariations {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPrompt {
    pub text: String,
    pub group: TopologyGroup,
    pub body: Option<BodyShape>,
    pub gender: Option<PromptGender>,
    pub environment: Option<Environment>,
    pub age: Option<AgeGroup>,
}

fn options<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

/// Renders the generation prompts for the synthetic topology corpus: the
/// Cartesian product of groups and variations, in group-major order.
pub fn build_training_prompts(
    groups: &[TopologyGroup],
    variations: &PromptVariations,
) -> Vec<TrainingPrompt> {
    let mut out = Vec::new();
    for &group in groups {
        for body in options(&variations.body) {
            for gender in options(&variations.gender) {
                for environment in options(&variations.environment) {
                    for age in options(&variations.age) {
                        let mut text = group.phrase().to_string();
                        if let Some(b) = body {
                            text.push_str(&format!(", {} body shape", b.word()));
                        }
                        if let Some(g) = gender {
                            text.push_str(&format!(", {}", g.word()));
                        }
                        if let Some(e) = environment {
                            text.push_str(&format!(", {} environment", e.word()));
                        }
                        if let Some(a) = age {
                            text.push_str(&format!(", {} age", a.word()));
                        }
                        text.push_str(", looking at camera, casual, portrait");
                        out.push(TrainingPrompt { text, group, body, gender, environment, age });
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    /// Output channels of the three convolution blocks.
    pub widths: [usize; 3],
    /// Width of the latent (first fully connected) layer.
    pub latent_dim: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the training set held out for early stopping.
    pub validation_fraction: f64,
    /// Maximum random luma shift applied to training crops, as a fraction of
    /// the 8-bit range.
    pub brightness_jitter: f64,
    pub seed: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            latent_dim: 256,
            max_epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            patience: 3,
            validation_fraction: 0.1,
            brightness_jitter: 0.15,
            seed: 7,
        }
    }
}

impl TopologyConfig {
    /// Narrow variant for quick desk runs and tests.
    pub fn small() -> Self {
        Self { widths: [8, 16, 32], latent_dim: 64, ..Self::default() }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyMeta {
    pub widths: [usize; 3],
    pub latent_dim: usize,
    pub config_hash: String,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyFeatures {
    pub latent: Vec<f32>,
    pub logits: [f32; NUM_GROUPS],
}

impl TopologyFeatures {
    pub fn group_probabilities(&self) -> Vec<f32> {
        softmax(&self.logits)
    }

    pub fn predicted_group(&self) -> TopologyGroup {
        TopologyGroup::ALL[argmax(&self.logits)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyModel {
    pub conv: [Conv3x3; 3],
    pub fc_latent: Dense,
    pub fc_logits: Dense,
    pub meta: TopologyMeta,
    version: String,
}

struct Cache {
    input: Vec<f32>,
    cols: [Vec<f32>; 3],
    act: [Vec<f32>; 3],
    pool_arg: [Vec<u32>; 3],
    flat: Vec<f32>,
    latent: Vec<f32>,
    logits: Vec<f32>,
}

struct Grads {
    conv_w: [Vec<f32>; 3],
    conv_b: [Vec<f32>; 3],
    fc1_w: Vec<f32>,
    fc1_b: Vec<f32>,
    fc2_w: Vec<f32>,
    fc2_b: Vec<f32>,
}

impl Grads {
    fn zeros(m: &TopologyModel) -> Self {
        Self {
            conv_w: m.conv.clone().map(|c| vec![0.0; c.weight.len()]),
            conv_b: m.conv.clone().map(|c| vec![0.0; c.bias.len()]),
            fc1_w: vec![0.0; m.fc_latent.weight.len()],
            fc1_b: vec![0.0; m.fc_latent.bias.len()],
            fc2_w: vec![0.0; m.fc_logits.weight.len()],
            fc2_b: vec![0.0; m.fc_logits.bias.len()],
        }
    }

    fn buffers(&mut self) -> Vec<&mut [f32]> {
        let [w0, w1, w2] = &mut self.conv_w;
        let [b0, b1, b2] = &mut self.conv_b;
        vec![w0, b0, w1, b1, w2, b2, &mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]
    }
}

/// Converts a crop to channel-major floats in [0, 1].
pub fn crop_tensor(crop: &RgbImage) -> Vec<f32> {
    let hw = (crop.width() * crop.height()) as usize;
    let mut out = vec![0.0; 3 * hw];
    for (i, p) in crop.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = f32::from(p.0[c]) / 255.0;
        }
    }
    out
}

impl TopologyModel {
    pub fn new(config: &TopologyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [c1, c2, c3] = config.widths;
        let conv = [
            Conv3x3::new(&mut rng, 3, c1),
            Conv3x3::new(&mut rng, c1, c2),
            Conv3x3::new(&mut rng, c2, c3),
        ];
        let flat = c3 * (INPUT / 8) * (INPUT / 8);
        let fc_latent = Dense::new(&mut rng, flat, config.latent_dim);
        let fc_logits = Dense::new(&mut rng, config.latent_dim, NUM_GROUPS);
        let meta = TopologyMeta {
            widths: config.widths,
            latent_dim: config.latent_dim,
            config_hash: config.hash(),
            epochs_run: 0,
            final_train_loss: 0.0,
            train_accuracy: 0.0,
            test_accuracy: None,
        };
        let mut m = Self { conv, fc_latent, fc_logits, meta, version: String::new() };
        m.refresh_version();
        m
    }

    pub fn latent_dim(&self) -> usize {
        self.meta.latent_dim
    }

    /// Content hash of the weights.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn architecture(&self) -> String {
        let [c1, c2, c3] = self.meta.widths;
        let flat = c3 * (INPUT / 8) * (INPUT / 8);
        format!(
            "input(3x{INPUT}x{INPUT})|conv3x3(3->{c1})+relu+maxpool2|conv3x3({c1}->{c2})+relu+maxpool2|\
             conv3x3({c2}->{c3})+relu+maxpool2|fc({flat}->{})+relu|fc({}->{NUM_GROUPS})",
            self.meta.latent_dim, self.meta.latent_dim
        )
    }

    fn tensors(&self) -> Vec<Tensor> {
        let mut t = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            t.push(Tensor::f32(&format!("conv{}.weight", i + 1), &[c.out_channels, c.in_channels * 9], &c.weight));
            t.push(Tensor::f32(&format!("conv{}.bias", i + 1), &[c.out_channels], &c.bias));
        }
        let (a, b) = (&self.fc_latent, &self.fc_logits);
        t.push(Tensor::f32("fc1.weight", &[a.outputs, a.inputs], &a.weight));
        t.push(Tensor::f32("fc1.bias", &[a.outputs], &a.bias));
        t.push(Tensor::f32("fc2.weight", &[b.outputs, b.inputs], &b.weight));
        t.push(Tensor::f32("fc2.bias", &[b.outputs], &b.bias));
        t
    }

    fn refresh_version(&mut self) {
        self.version = crate::checkpoint::weights_version(&self.architecture(), &self.tensors());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = serde_json::to_value(&self.meta).expect("meta serializes");
        meta["latent_dim"] = self.meta.latent_dim.into();
        Checkpoint::new("topology", &self.architecture(), meta, self.tensors())
    }

    pub fn save(&self, path: &Path) -> Result<(), TopologyError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TopologyError> {
        ck.expect_kind("topology")?;
        let meta: TopologyMeta = serde_json::from_value(ck.header.metadata.clone())?;
        let mut m = Self::new(&TopologyConfig {
            widths: meta.widths,
            latent_dim: meta.latent_dim,
            ..TopologyConfig::default()
        });
        for i in 0..3 {
            let c = &mut m.conv[i];
            c.weight = ck.take_f32(&format!("conv{}.weight", i + 1), &[c.out_channels, c.in_channels * 9])?;
            c.bias = ck.take_f32(&format!("conv{}.bias", i + 1), &[c.out_channels])?;
        }
        let a = &mut m.fc_latent;
        a.weight = ck.take_f32("fc1.weight", &[a.outputs, a.inputs])?;
        a.bias = ck.take_f32("fc1.bias", &[a.outputs])?;
        let b = &mut m.fc_logits;
        b.weight = ck.take_f32("fc2.weight", &[b.outputs, b.inputs])?;
        b.bias = ck.take_f32("fc2.bias", &[b.outputs])?;
        m.meta = meta;
        m.refresh_version();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn forward(&self, input: Vec<f32>) -> Cache {
        let mut x = input.clone();
        let mut side = INPUT;
        let mut cols: [Vec<f32>; 3] = Default::default();
        let mut act: [Vec<f32>; 3] = Default::default();
        let mut pool_arg: [Vec<u32>; 3] = Default::default();
        for i in 0..3 {
            let (mut y, c) = self.conv[i].forward(&x, side, side);
            relu_inplace(&mut y);
            let (p, arg) = maxpool2(&y, self.conv[i].out_channels, side, side);
            cols[i] = c;
            act[i] = y;
            pool_arg[i] = arg;
            x = p;
            side /= 2;
        }
        let mut latent = self.fc_latent.forward(&x);
        relu_inplace(&mut latent);
        let logits = self.fc_logits.forward(&latent);
        Cache { input, cols, act, pool_arg, flat: x, latent, logits }
    }

    fn backward(&self, cache: &Cache, grad_logits: &[f32], g: &mut Grads) {
        let mut d = self.fc_logits.backward(&cache.latent, grad_logits, &mut g.fc2_w, &mut g.fc2_b);
        relu_backward(&cache.latent, &mut d);
        let mut d = self.fc_latent.backward(&cache.flat, &d, &mut g.fc1_w, &mut g.fc1_b);
        for i in (0..3).rev() {
            let side = INPUT >> i;
            let mut da = maxpool2_backward(&d, &cache.pool_arg[i], cache.act[i].len());
            relu_backward(&cache.act[i], &mut da);
            let need = i > 0;
            let din = self.conv[i].backward(
                &cache.cols[i],
                &da,
                side,
                side,
                &mut g.conv_w[i],
                &mut g.conv_b[i],
                need,
            );
            if let Some(din) = din {
                d = din;
            }
        }
        let _ = &cache.input;
    }

    fn params(&mut self) -> Vec<&mut [f32]> {
        let [c0, c1, c2] = &mut self.conv;
        vec![
            &mut c0.weight,
            &mut c0.bias,
            &mut c1.weight,
            &mut c1.bias,
            &mut c2.weight,
            &mut c2.bias,
            &mut self.fc_latent.weight,
            &mut self.fc_latent.bias,
            &mut self.fc_logits.weight,
            &mut self.fc_logits.bias,
        ]
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for c in &self.conv {
            v.push(c.weight.len());
            v.push(c.bias.len());
        }
        v.extend([
            self.fc_latent.weight.len(),
            self.fc_latent.bias.len(),
            self.fc_logits.weight.len(),
            self.fc_logits.bias.len(),
        ]);
        v
    }

    fn infer(&self, crop: &RgbImage) -> (Vec<f32>, Vec<f32>) {
        let c = self.forward(crop_tensor(crop));
        (c.latent, c.logits)
    }
}

/// Latent features and group logits of one normalized face crop.
pub fn extract_features(model: &TopologyModel, crop: &RgbImage) -> Result<TopologyFeatures, TopologyError> {
    if crop.width() as usize != INPUT || crop.height() as usize != INPUT {
        return Err(TopologyError::ShapeMismatch { found_w: crop.width(), found_h: crop.height() });
    }
    let (latent, logits) = model.infer(crop);
    let logits: [f32; NUM_GROUPS] = logits.try_into().expect("six logits");
    Ok(TopologyFeatures { latent, logits })
}

#[derive(Debug, Clone)]
pub struct TopologySample {
    pub crop: RgbImage,
    pub group: TopologyGroup,
}

fn jitter_crop(crop: &RgbImage, rng: &mut ChaCha8Rng, amount: f64) -> RgbImage {
    if amount <= 0.0 {
        return crop.clone();
    }
    let delta = rng.random_range(-amount..=amount) * 255.0;
    shift_luma(crop, delta)
}

fn accuracy(model: &TopologyModel, samples: &[TopologySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| argmax(&model.infer(&s.crop).1) == s.group.index())
        .count();
    hits as f64 / samples.len() as f64
}

fn mean_loss(model: &TopologyModel, samples: &[&TopologySample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| f64::from(cross_entropy(&model.infer(&s.crop).1, s.group.index()).0))
        .sum();
    total / samples.len().max(1) as f64
}

/// Trains the network on group-labeled crops with cross-entropy and Adam.
/// Part of `train` is held out for early stopping; the best validation
/// weights are kept. Fully deterministic for a given seed.
pub fn train_topology(
    train: &[TopologySample],
    test: &[TopologySample],
    config: &TopologyConfig,
) -> Result<TopologyModel, TopologyError> {
    for g in TopologyGroup::ALL {
        if !train.iter().any(|s| s.group == g) {
            return Err(TopologyError::InsufficientData(format!("no training samples for group {g}")));
        }
    }
    for s in train.iter().chain(test) {
        if s.crop.width() as usize != INPUT || s.crop.height() as usize != INPUT {
            return Err(TopologyError::ShapeMismatch { found_w: s.crop.width(), found_h: s.crop.height() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7470_6f6c);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((train.len() as f64 * config.validation_fraction).round() as usize).min(train.len() - 1);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let val: Vec<&TopologySample> = val_idx.iter().map(|&i| &train[i]).collect();
    let mut fit: Vec<usize> = fit_idx.to_vec();

    let mut model = TopologyModel::new(config);
    let mut opt = Adam::new(
        AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() },
        &model.param_sizes(),
    );
    let mut best = (f64::INFINITY, model.clone(), 0usize);
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut last_train_loss = 0.0;
    for epoch in 0..config.max_epochs {
        fit.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in fit.chunks(config.batch_size.max(1)) {
            let mut grads = Grads::zeros(&model);
            for &i in batch {
                let crop = jitter_crop(&train[i].crop, &mut rng, config.brightness_jitter);
                let cache = model.forward(crop_tensor(&crop));
                let (loss, mut dlogits) = cross_entropy(&cache.logits, train[i].group.index());
                epoch_loss += f64::from(loss);
                let scale = 1.0 / batch.len() as f32;
                dlogits.iter_mut().for_each(|d| *d *= scale);
                model.backward(&cache, &dlogits, &mut grads);
            }
            let grad_views: Vec<&[f32]> = grads.buffers().into_iter().map(|b| &*b).collect();
            opt.update(&mut model.params(), &grad_views);
        }
        epochs_run = epoch + 1;
        last_train_loss = epoch_loss / fit.len().max(1) as f64;
        let val_loss = if val.is_empty() { last_train_loss } else { mean_loss(&model, &val) };
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epochs_run);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let mut model = best.1;
    model.meta.epochs_run = epochs_run;
    model.meta.final_train_loss = last_train_loss;
    model.meta.train_accuracy = accuracy(&model, train);
    model.meta.test_accuracy = (!test.is_empty()).then(|| accuracy(&model, test));
    model.refresh_version();
    Ok(model)
}
