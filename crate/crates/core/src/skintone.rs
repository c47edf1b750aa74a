//! Topology-aware skintone classifier and ordinal evaluation.
//!
//! The fusion model projects the standardized topology latent and the pixel
//! distribution to a common width, treats them as a two-token sequence, runs
//! one single-head self-attention block with a residual connection, mean-pools
//! and feeds two heads: skintone scale and topology group. Training minimises
//! `alpha * CE(topology) + (1 - alpha) * CE(skintone)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, Tensor};
use crate::color::PixelDistribution;
use crate::nn::{argmax, cross_entropy, softmax, Adam, AdamConfig};
use crate::scale::SkinToneScale;
use crate::topology::{TopologyFeatures, TopologyModel, NUM_GROUPS};

#[derive(Debug, Error)]
pub enum SkinToneError {
    #[error("{what} has dimension {found}, model expects {expected}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("label {label} outside 0..{classes}")]
    InvalidLabel { label: usize, classes: usize },
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("scale {index} outside 1..={num_scales}")]
    ScaleOutOfRange { index: u8, num_scales: u8 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid fusion metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// `alpha * CE(topo) + (1 - alpha) * CE(st)`; the skintone term is dropped
/// when the sample has no skintone label.
pub fn joint_loss(
    topo_logits: &[f64],
    topo_label: usize,
    st_logits: &[f64],
    st_label: Option<usize>,
    alpha: f64,
) -> Result<f64, SkinToneError> {
    Ok(joint_loss_grad(topo_logits, topo_label, st_logits, st_label, alpha)?.0)
}

/// Joint loss with its gradients with respect to both logit vectors.
pub fn joint_loss_grad(
    topo_logits: &[f64],
    topo_label: usize,
    st_logits: &[f64],
    st_label: Option<usize>,
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>), SkinToneError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SkinToneError::InvalidAlpha(alpha));
    }
    if topo_label >= topo_logits.len() {
        return Err(SkinToneError::InvalidLabel { label: topo_label, classes: topo_logits.len() });
    }
    let (lt, mut gt) = cross_entropy(topo_logits, topo_label);
    gt.iter_mut().for_each(|g| *g *= alpha);
    let mut loss = alpha * lt;
    let mut gs = vec![0.0; st_logits.len()];
    if let Some(label) = st_label {
        if label >= st_logits.len() {
            return Err(SkinToneError::InvalidLabel { label, classes: st_logits.len() });
        }
        let (ls, g) = cross_entropy(st_logits, label);
        loss += (1.0 - alpha) * ls;
        gs = g.into_iter().map(|v| v * (1.0 - alpha)).collect();
    }
    Ok((loss, gt, gs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub num_scales: u8,
    /// Width of the shared token space.
    pub hidden: usize,
    pub alpha: f64,
    /// Scale distance still counted as correct during evaluation.
    pub tolerance: u8,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_scales: 10,
            hidden: 32,
            alpha: 0.3,
            tolerance: 1,
            max_epochs: 300,
            batch_size: 32,
            learning_rate: 3e-3,
            patience: 30,
            validation_fraction: 0.15,
            seed: 11,
        }
    }
}

impl FusionConfig {
    /// Defaults for a three-class dataset, evaluated without tolerance.
    pub fn three_class() -> Self {
        Self { num_scales: 3, tolerance: 0, ..Self::default() }
    }
}

/// Per-epoch losses recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMeta {
    pub num_scales: u8,
    pub latent_dim: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub tolerance: u8,
    pub topology_version: String,
    pub curves: Vec<EpochLoss>,
    pub best_validation_loss: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    wt: Vec<f64>,
    bt: Vec<f64>,
    wp: Vec<f64>,
    bp: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    ws: Vec<f64>,
    bs: Vec<f64>,
    wg: Vec<f64>,
    bg: Vec<f64>,
}

const PARAM_NAMES: [&str; 11] = ["wt", "bt", "wp", "bp", "wq", "wk", "wv", "ws", "bs", "wg", "bg"];

impl Params {
    fn shapes(d: usize, s: usize, h: usize) -> [[usize; 2]; 11] {
        [[h, d], [h, 1], [h, s], [h, 1], [h, h], [h, h], [h, h], [s, h], [s, 1], [NUM_GROUPS, h], [NUM_GROUPS, 1]]
    }

    fn init(d: usize, s: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("valid std");
            (0..rows * cols).map(|_| n.sample(&mut rng)).collect::<Vec<f64>>()
        };
        Self {
            wt: mat(h, d),
            bt: vec![0.0; h],
            wp: mat(h, s),
            bp: vec![0.0; h],
            wq: mat(h, h),
            wk: mat(h, h),
            wv: mat(h, h),
            ws: mat(s, h),
            bs: vec![0.0; s],
            wg: mat(NUM_GROUPS, h),
            bg: vec![0.0; NUM_GROUPS],
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            wt: z(&self.wt),
            bt: z(&self.bt),
            wp: z(&self.wp),
            bp: z(&self.bp),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            ws: z(&self.ws),
            bs: z(&self.bs),
            wg: z(&self.wg),
            bg: z(&self.bg),
        }
    }

    fn all(&self) -> [&Vec<f64>; 11] {
        [&self.wt, &self.bt, &self.wp, &self.bp, &self.wq, &self.wk, &self.wv, &self.ws, &self.bs, &self.wg, &self.bg]
    }

    fn all_mut(&mut self) -> [&mut Vec<f64>; 11] {
        [
            &mut self.wt,
            &mut self.bt,
            &mut self.wp,
            &mut self.bp,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.ws,
            &mut self.bs,
            &mut self.wg,
            &mut self.bg,
        ]
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            dot + bias.map_or(0.0, |b| b[r])
        })
        .collect()
}

fn matvec_t_add(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * g[r];
        }
    }
}

fn outer_add(out: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, gr) in g.iter().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            out[r * cols + c] += gr * xc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Forward {
    u: Vec<f64>,
    w: Vec<f64>,
    x: [Vec<f64>; 2],
    q: [Vec<f64>; 2],
    k: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
    a: [[f64; 2]; 2],
    m: Vec<f64>,
    z: Vec<f64>,
    st_logits: Vec<f64>,
    topo_logits: Vec<f64>,
}

/// Trained fusion classifier. Immutable after training.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    params: Params,
    latent_mean: Vec<f64>,
    latent_std: Vec<f64>,
    dist_mean: Vec<f64>,
    dist_std: Vec<f64>,
    pub meta: FusionMeta,
    version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinTonePrediction {
    pub scale: SkinToneScale,
    pub probabilities: Vec<f64>,
    /// The color branch had no skin pixels; the distribution was uniform.
    pub fallback: bool,
}

impl SkinTonePrediction {
    pub fn confidence(&self) -> f64 {
        self.probabilities[self.scale.offset()]
    }
}

impl FusionModel {
    pub fn new(latent_dim: usize, config: &FusionConfig) -> Self {
        let s = usize::from(config.num_scales);
        let meta = FusionMeta {
            num_scales: config.num_scales,
            latent_dim,
            hidden: config.hidden,
            alpha: config.alpha,
            tolerance: config.tolerance,
            topology_version: String::new(),
            curves: Vec::new(),
            best_validation_loss: 0.0,
            warnings: Vec::new(),
        };
        let mut m = Self {
            params: Params::init(latent_dim, s, config.hidden, config.seed),
            latent_mean: vec![0.0; latent_dim],
            latent_std: vec![1.0; latent_dim],
            dist_mean: vec![0.0; s],
            dist_std: vec![1.0; s],
            meta,
            version: String::new(),
        };
        m.refresh_version();
        m
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn num_scales(&self) -> usize {
        usize::from(self.meta.num_scales)
    }

    pub fn latent_dim(&self) -> usize {
        self.meta.latent_dim
    }

    pub fn architecture(&self) -> String {
        let FusionMeta { latent_dim: d, num_scales: s, hidden: h, .. } = self.meta;
        format!(
            "standardize|tokens[proj({d}->{h}),proj({s}->{h})]|self-attention(1 head,{h})+residual|mean-pool+relu|\
             heads[skintone({h}->{s}),topology({h}->{NUM_GROUPS})]"
        )
    }

    fn tensors(&self) -> Vec<Tensor> {
        let shapes = Params::shapes(self.meta.latent_dim, self.num_scales(), self.meta.hidden);
        let mut t: Vec<Tensor> = PARAM_NAMES
            .iter()
            .zip(self.params.all())
            .zip(shapes)
            .map(|((name, v), shape)| Tensor::f64(name, &shape, v))
            .collect();
        t.push(Tensor::f64("latent_mean", &[self.meta.latent_dim], &self.latent_mean));
        t.push(Tensor::f64("latent_std", &[self.meta.latent_dim], &self.latent_std));
        t.push(Tensor::f64("dist_mean", &[self.num_scales()], &self.dist_mean));
        t.push(Tensor::f64("dist_std", &[self.num_scales()], &self.dist_std));
        t
    }

    fn refresh_version(&mut self) {
        self.version = crate::checkpoint::weights_version(&self.architecture(), &self.tensors());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(&self.meta).expect("meta serializes");
        Checkpoint::new("fusion", &self.architecture(), meta, self.tensors())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SkinToneError> {
        ck.expect_kind("fusion")?;
        let meta: FusionMeta = serde_json::from_value(ck.header.metadata.clone())?;
        let d = meta.latent_dim;
        let shapes = Params::shapes(d, usize::from(meta.num_scales), meta.hidden);
        let mut params = Params::init(d, usize::from(meta.num_scales), meta.hidden, 0);
        for ((name, slot), shape) in PARAM_NAMES.iter().zip(params.all_mut()).zip(shapes) {
            *slot = ck.take_f64(name, &shape)?;
        }
        let mut m = Self {
            params,
            latent_mean: ck.take_f64("latent_mean", &[d])?,
            latent_std: ck.take_f64("latent_std", &[d])?,
            dist_mean: ck.take_f64("dist_mean", &[usize::from(meta.num_scales)])?,
            dist_std: ck.take_f64("dist_std", &[usize::from(meta.num_scales)])?,
            meta,
            version: String::new(),
        };
        m.refresh_version();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SkinToneError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, SkinToneError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn check_dims(&self, latent: usize, dist: usize) -> Result<(), SkinToneError> {
        if latent != self.meta.latent_dim {
            return Err(SkinToneError::DimensionMismatch {
                what: "topology latent",
                expected: self.meta.latent_dim,
                found: latent,
            });
        }
        if dist != self.num_scales() {
            return Err(SkinToneError::DimensionMismatch {
                what: "pixel distribution",
                expected: self.num_scales(),
                found: dist,
            });
        }
        Ok(())
    }

    /// Both token inputs are standardized with statistics of the fitting
    /// split, so neither branch dominates by scale alone.
    fn standardize(&self, latent: &[f32], dist: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = latent
            .iter()
            .zip(self.latent_mean.iter().zip(&self.latent_std))
            .map(|(&x, (m, s))| (f64::from(x) - m) / s)
            .collect();
        let w = dist.iter().zip(self.dist_mean.iter().zip(&self.dist_std)).map(|(&x, (m, s))| (x - m) / s).collect();
        (u, w)
    }

    fn forward(&self, u: Vec<f64>, w: Vec<f64>) -> Forward {
        let p = &self.params;
        let (d, s, h) = (self.meta.latent_dim, self.num_scales(), self.meta.hidden);
        let x = [matvec(&p.wt, h, d, &u, Some(&p.bt)), matvec(&p.wp, h, s, &w, Some(&p.bp))];
        let proj = |wm: &[f64]| [matvec(wm, h, h, &x[0], None), matvec(wm, h, h, &x[1], None)];
        let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
        let scale = 1.0 / (h as f64).sqrt();
        let mut a = [[0.0; 2]; 2];
        for i in 0..2 {
            let scores = [dot(&q[i], &k[0]) * scale, dot(&q[i], &k[1]) * scale];
            let sm = softmax(&scores);
            a[i] = [sm[0], sm[1]];
        }
        let m: Vec<f64> = (0..h)
            .map(|c| {
                let y0 = x[0][c] + a[0][0] * v[0][c] + a[0][1] * v[1][c];
                let y1 = x[1][c] + a[1][0] * v[0][c] + a[1][1] * v[1][c];
                (y0 + y1) / 2.0
            })
            .collect();
        let z: Vec<f64> = m.iter().map(|&v| v.max(0.0)).collect();
        let st_logits = matvec(&p.ws, s, h, &z, Some(&p.bs));
        let topo_logits = matvec(&p.wg, NUM_GROUPS, h, &z, Some(&p.bg));
        Forward { u, w, x, q, k, v, a, m, z, st_logits, topo_logits }
    }

    fn backward(&self, f: &Forward, d_st: &[f64], d_topo: &[f64], g: &mut Params) {
        let p = &self.params;
        let (d, s, h) = (self.meta.latent_dim, self.num_scales(), self.meta.hidden);
        outer_add(&mut g.ws, d_st, &f.z);
        outer_add(&mut g.wg, d_topo, &f.z);
        for (b, v) in g.bs.iter_mut().zip(d_st) {
            *b += v;
        }
        for (b, v) in g.bg.iter_mut().zip(d_topo) {
            *b += v;
        }
        let mut dz = vec![0.0; h];
        matvec_t_add(&p.ws, s, h, d_st, &mut dz);
        matvec_t_add(&p.wg, NUM_GROUPS, h, d_topo, &mut dz);
        let dy: Vec<f64> = dz.iter().zip(&f.m).map(|(g, &m)| if m > 0.0 { g / 2.0 } else { 0.0 }).collect();

        let mut dx = [dy.clone(), dy.clone()];
        let mut dv = [vec![0.0; h], vec![0.0; h]];
        let mut dq = [vec![0.0; h], vec![0.0; h]];
        let mut dk = [vec![0.0; h], vec![0.0; h]];
        let scale = 1.0 / (h as f64).sqrt();
        for i in 0..2 {
            let da = [dot(&dy, &f.v[0]), dot(&dy, &f.v[1])];
            let mean = f.a[i][0] * da[0] + f.a[i][1] * da[1];
            for j in 0..2 {
                for c in 0..h {
                    dv[j][c] += f.a[i][j] * dy[c];
                }
                let ds = f.a[i][j] * (da[j] - mean) * scale;
                for c in 0..h {
                    dq[i][c] += ds * f.k[j][c];
                    dk[j][c] += ds * f.q[i][c];
                }
            }
        }
        for t in 0..2 {
            outer_add(&mut g.wq, &dq[t], &f.x[t]);
            outer_add(&mut g.wk, &dk[t], &f.x[t]);
            outer_add(&mut g.wv, &dv[t], &f.x[t]);
            matvec_t_add(&p.wq, h, h, &dq[t], &mut dx[t]);
            matvec_t_add(&p.wk, h, h, &dk[t], &mut dx[t]);
            matvec_t_add(&p.wv, h, h, &dv[t], &mut dx[t]);
        }
        outer_add(&mut g.wt, &dx[0], &f.u);
        outer_add(&mut g.wp, &dx[1], &f.w);
        for c in 0..h {
            g.bt[c] += dx[0][c];
            g.bp[c] += dx[1][c];
        }
        debug_assert_eq!(f.u.len(), d);
    }

    fn sample_loss(&self, sample: &FusionSample, grads: Option<(&mut Params, f64)>) -> f64 {
        let (u, w) = self.standardize(&sample.latent, &sample.distribution);
        let f = self.forward(u, w);
        let (loss, gt, gs) = joint_loss_grad(
            &f.topo_logits,
            sample.topo_label(),
            &f.st_logits,
            sample.scale.map(|s| s.offset()),
            self.meta.alpha,
        )
        .expect("labels validated before training");
        if let Some((g, weight)) = grads {
            let gs: Vec<f64> = gs.iter().map(|v| v * weight).collect();
            let gt: Vec<f64> = gt.iter().map(|v| v * weight).collect();
            self.backward(&f, &gs, &gt, g);
        }
        loss
    }
}

/// Fuses topology features and the pixel distribution into a skintone
/// prediction.
pub fn fuse_and_classify(
    model: &FusionModel,
    topo: &TopologyFeatures,
    dist: &PixelDistribution,
) -> Result<SkinTonePrediction, SkinToneError> {
    model.check_dims(topo.latent.len(), dist.weights.len())?;
    let (u, w) = model.standardize(&topo.latent, &dist.weights);
    let f = model.forward(u, w);
    let probabilities = softmax(&f.st_logits);
    Ok(SkinTonePrediction {
        scale: SkinToneScale::from_offset(argmax(&probabilities)),
        probabilities,
        fallback: dist.fallback,
    })
}

/// One training example for the fusion model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub latent: Vec<f32>,
    pub topo_logits: Vec<f32>,
    /// Pixel-distribution bin weights.
    pub distribution: Vec<f64>,
    pub scale: Option<SkinToneScale>,
    /// Known topology group index; the topology model's own prediction is
    /// used as a pseudo-label when absent.
    pub group: Option<usize>,
}

impl FusionSample {
    pub fn new(features: &TopologyFeatures, dist: &PixelDistribution, scale: Option<SkinToneScale>) -> Self {
        Self {
            latent: features.latent.clone(),
            topo_logits: features.logits.to_vec(),
            distribution: dist.weights.clone(),
            scale,
            group: None,
        }
    }

    fn topo_label(&self) -> usize {
        self.group.unwrap_or_else(|| argmax(&self.topo_logits))
    }
}

/// Trains the fusion classifier with Adam on the joint loss. A seeded share of
/// the samples is held out for early stopping; the weights with the lowest
/// validation loss are returned. Scale classes absent from the training split
/// are reported in `meta.warnings`.
pub fn train_fusion(
    samples: &[FusionSample],
    topo: &TopologyModel,
    config: &FusionConfig,
) -> Result<FusionModel, SkinToneError> {
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(SkinToneError::InvalidAlpha(config.alpha));
    }
    if samples.len() < 2 {
        return Err(SkinToneError::InsufficientData(format!("{} samples, need at least 2", samples.len())));
    }
    let d = topo.latent_dim();
    let s = usize::from(config.num_scales);
    for x in samples {
        if x.latent.len() != d {
            return Err(SkinToneError::DimensionMismatch { what: "topology latent", expected: d, found: x.latent.len() });
        }
        if x.distribution.len() != s {
            return Err(SkinToneError::DimensionMismatch {
                what: "pixel distribution",
                expected: s,
                found: x.distribution.len(),
            });
        }
        if let Some(sc) = x.scale {
            if sc.index() > config.num_scales {
                return Err(SkinToneError::ScaleOutOfRange { index: sc.index(), num_scales: config.num_scales });
            }
        }
        if let Some(g) = x.group {
            if g >= NUM_GROUPS {
                return Err(SkinToneError::InvalidLabel { label: g, classes: NUM_GROUPS });
            }
        }
    }
    if samples.iter().all(|x| x.scale.is_none()) {
        return Err(SkinToneError::InsufficientData("no sample carries a skintone label".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6675_7365);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).min(samples.len() - 1);
    let (val, fit) = order.split_at(n_val);
    let mut fit = fit.to_vec();

    let mut model = FusionModel::new(d, config);
    model.meta.topology_version = topo.version().to_string();
    for c in 0..s {
        if !fit.iter().any(|&i| samples[i].scale.map(|x| x.offset()) == Some(c)) {
            model.meta.warnings.push(format!("scale {} has no training samples", c + 1));
        }
    }
    // Latent standardization from the fitting split.
    let n = fit.len() as f64;
    for j in 0..d {
        let mean = fit.iter().map(|&i| f64::from(samples[i].latent[j])).sum::<f64>() / n;
        let var = fit.iter().map(|&i| (f64::from(samples[i].latent[j]) - mean).powi(2)).sum::<f64>() / n;
        model.latent_mean[j] = mean;
        model.latent_std[j] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
    }
    for j in 0..s {
        let mean = fit.iter().map(|&i| samples[i].distribution[j]).sum::<f64>() / n;
        let var = fit.iter().map(|&i| (samples[i].distribution[j] - mean).powi(2)).sum::<f64>() / n;
        model.dist_mean[j] = mean;
        model.dist_std[j] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
    }

    let sizes: Vec<usize> = model.params.all().iter().map(|v| v.len()).collect();
    let mut opt = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() }, &sizes);
    let eval = |m: &FusionModel, idx: &[usize]| {
        idx.iter().map(|&i| m.sample_loss(&samples[i], None)).sum::<f64>() / idx.len().max(1) as f64
    };
    let mut best = (f64::INFINITY, model.clone());
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        fit.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in fit.chunks(config.batch_size.max(1)) {
            let mut g = model.params.zeros_like();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                total += model.sample_loss(&samples[i], Some((&mut g, weight)));
            }
            let grads: Vec<&[f64]> = g.all().into_iter().map(|v| v.as_slice()).collect();
            let mut params: Vec<&mut [f64]> = model.params.all_mut().into_iter().map(|v| v.as_mut_slice()).collect();
            opt.update(&mut params, &grads);
        }
        let train_loss = total / fit.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { eval(&model, val) };
        model.meta.curves.push(EpochLoss { epoch: epoch + 1, train: train_loss, validation: val_loss });
        if val_loss < best.0 {
            best = (val_loss, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let curves = model.meta.curves.clone();
    let mut model = best.1;
    model.meta.curves = curves;
    model.meta.best_validation_loss = best.0;
    model.refresh_version();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub scale: u8,
    /// Samples whose label is this scale.
    pub support: usize,
    /// Samples predicted as this scale.
    pub predicted: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Share of samples within tolerance.
    pub accuracy: f64,
    /// Squared scale error normalized by the largest possible squared error.
    pub mse: f64,
    pub tolerance: u8,
    pub num_scales: u8,
    pub per_class: Vec<ClassMetrics>,
}

/// Precision, recall and normalized MSE for ordinal predictions.
///
/// A prediction is correct when it lies within `tolerance` scales of the
/// label. Per-class precision uses the samples predicted as that class,
/// per-class recall the samples labeled as it; both are macro-averaged over
/// the classes where they are defined.
pub fn ordinal_metrics(
    predictions: &[SkinToneScale],
    labels: &[SkinToneScale],
    tolerance: u8,
    num_scales: u8,
) -> Result<OrdinalMetrics, SkinToneError> {
    if predictions.len() != labels.len() {
        return Err(SkinToneError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if predictions.is_empty() {
        return Err(SkinToneError::EmptyInput);
    }
    if num_scales < 2 {
        return Err(SkinToneError::ScaleOutOfRange { index: num_scales, num_scales: 2 });
    }
    for s in predictions.iter().chain(labels) {
        if s.index() < 1 || s.index() > num_scales {
            return Err(SkinToneError::ScaleOutOfRange { index: s.index(), num_scales });
        }
    }
    let ok = |p: SkinToneScale, l: SkinToneScale| p.distance(l) <= tolerance;
    let mut per_class = Vec::with_capacity(usize::from(num_scales));
    for c in 1..=num_scales {
        let (mut predicted, mut p_hit, mut support, mut r_hit) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            if p.index() == c {
                predicted += 1;
                p_hit += usize::from(ok(p, l));
            }
            if l.index() == c {
                support += 1;
                r_hit += usize::from(ok(p, l));
            }
        }
        per_class.push(ClassMetrics {
            scale: c,
            support,
            predicted,
            precision: (predicted > 0).then(|| p_hit as f64 / predicted as f64),
            recall: (support > 0).then(|| r_hit as f64 / support as f64),
        });
    }
    let macro_avg = |vals: Vec<f64>| vals.iter().sum::<f64>() / vals.len() as f64;
    let precision = macro_avg(per_class.iter().filter_map(|c| c.precision).collect());
    let recall = macro_avg(per_class.iter().filter_map(|c| c.recall).collect());
    let n = predictions.len() as f64;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| ok(**p, **l)).count();
    let sq: f64 = predictions.iter().zip(labels).map(|(p, l)| f64::from(p.distance(*l)).powi(2)).sum();
    let max = f64::from(num_scales - 1).powi(2);
    Ok(OrdinalMetrics {
        precision,
        recall,
        accuracy: hits as f64 / n,
        mse: sq / (n * max),
        tolerance,
        num_scales,
        per_class,
    })
}
