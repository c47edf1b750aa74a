//! Oracles and property checks shared by the property suite and the
//! acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fairlens_core::color::{distribution_from_histogram, dominant_pixels, otsu_threshold, segment_skin, FaceRegion};
use fairlens_core::fairness::{four_fifths_verdict, normalization_z, representation_bias, LabelCounts};
use fairlens_core::prompts::DemographicAxis;
use fairlens_core::scale::{ScalePalette, SkinToneScale};
use fairlens_core::skintone::{joint_loss, joint_loss_grad, ordinal_metrics};
use image::{Rgb, RgbImage};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

/// Randomized cases per property.
pub const CASES: u32 = 512;

/// A reference distribution given by integer numerators over a common
/// denominator.
#[derive(Debug, Clone)]
pub struct Reference {
    pub num: Vec<i64>,
    pub den: i64,
}

impl Reference {
    pub fn uniform(k: usize) -> Self {
        Self { num: vec![1; k], den: k as i64 }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.num.iter().map(|&a| a as f64 / self.den as f64).collect()
    }
}

/// Bias and four-fifths flags from the definitions, in integer arithmetic.
///
/// With `p_g = a_g / d` and `N` samples the total deviation is
/// `sum |n_g d - a_g N| / (N d)`, the normalizer is the largest one-hot
/// deviation `max_r sum_g |[g = r] d - a_g| / d`, and group `g` is flagged
/// when `|n_g d - a_g N| * thr_den > thr_num * a_g N`.
pub struct OracleResult {
    pub bias: f64,
    pub flags: Vec<bool>,
    pub fair: bool,
}

pub fn oracle_z(r: &Reference) -> (BigInt, BigInt) {
    let k = r.num.len();
    let best = (0..k)
        .map(|hot| {
            (0..k)
                .map(|g| {
                    let top = if g == hot { r.den } else { 0 };
                    BigInt::from((top - r.num[g]).abs())
                })
                .sum::<BigInt>()
        })
        .max()
        .unwrap();
    (best, BigInt::from(r.den))
}

pub fn oracle(counts: &[u64], r: &Reference, thr: (i64, i64)) -> OracleResult {
    let n: i64 = counts.iter().map(|&c| c as i64).sum();
    let dev: Vec<BigInt> = counts
        .iter()
        .zip(&r.num)
        .map(|(&c, &a)| BigInt::from((c as i64 * r.den - a * n).abs()))
        .collect();
    let s: BigInt = dev.iter().sum();
    let (z_num, _) = oracle_z(r);
    // (s / (N d)) / (z_num / d)
    let denom = BigInt::from(n) * &z_num;
    let bias = BigRational::new(s.clone(), denom.clone()).to_f64().unwrap();
    let flags = dev
        .iter()
        .zip(&r.num)
        .map(|(d, &a)| d * BigInt::from(thr.1) > BigInt::from(thr.0 * a * n))
        .collect();
    let fair = s * BigInt::from(thr.1) < denom * BigInt::from(thr.0);
    OracleResult { bias, flags, fair }
}

/// Every composition of `n` into `k` non-negative parts.
pub fn compositions(n: u64, k: usize) -> Vec<Vec<u64>> {
    if k == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in compositions(n - first, k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn axis_for(k: usize) -> DemographicAxis {
    if k == 5 {
        DemographicAxis::Skintone
    } else {
        DemographicAxis::Gender
    }
}

pub fn label_counts(counts: &[u64]) -> LabelCounts {
    let mut c = LabelCounts::new(axis_for(counts.len()), counts.to_vec());
    c.groups = (0..counts.len()).map(|i| format!("g{i}")).collect();
    c
}

/// Compares the library against the oracle for one count vector.
pub fn matches_oracle(counts: &[u64], r: &Reference) -> Result<(), String> {
    let p = r.as_f64();
    let lc = label_counts(counts);
    let want = oracle(counts, r, (1, 5));
    let got = representation_bias(&lc, &p).map_err(|e| e.to_string())?;
    if got.to_bits() != want.bias.to_bits() {
        return Err(format!("bias {counts:?} vs {:?}: {got:e} != {:e}", r.num, want.bias));
    }
    let v = four_fifths_verdict(&lc, &p, 0.2).map_err(|e| e.to_string())?;
    let flags: Vec<bool> = v.groups.iter().map(|g| g.biased).collect();
    if flags != want.flags || v.bias_fair != want.fair || v.bias.to_bits() != want.bias.to_bits() {
        return Err(format!("verdict {counts:?} vs {:?}: {flags:?} != {:?}", r.num, want.flags));
    }
    Ok(())
}

/// Largest between-class variance split from its definition
/// `w0 w1 (mu0 - mu1)^2`, smallest level on ties.
pub fn otsu_oracle(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    let mut best: Option<(usize, BigRational)> = None;
    for t in 0..256 {
        let w0: u64 = hist[..=t].iter().sum();
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let s0: u64 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let s1: u64 = hist[t + 1..].iter().enumerate().map(|(i, &c)| (i + t + 1) as u64 * c).sum();
        let r = |a: u64, b: u64| BigRational::new(BigInt::from(a), BigInt::from(b));
        let diff = r(s0, w0) - r(s1, w1);
        let var = r(w0, total) * r(w1, total) * &diff * &diff;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t, var));
        }
    }
    match best {
        Some((t, _)) => t as u8,
        None => hist.iter().position(|&c| c > 0).unwrap() as u8,
    }
}

// Strategies.

/// Histograms mixing dense noise, sparse spikes and narrow bands.
pub fn histogram() -> impl Strategy<Value = [u64; 256]> {
    let dense = prop::collection::vec(0u64..1000, 256);
    let sparse = prop::collection::vec((0usize..256, 1u64..100_000), 1..8).prop_map(|spikes| {
        let mut h = vec![0u64; 256];
        for (i, c) in spikes {
            h[i] += c;
        }
        h
    });
    let band = (0usize..200, 1usize..56, prop::collection::vec(0u64..50, 56)).prop_map(|(start, len, vals)| {
        let mut h = vec![0u64; 256];
        for (j, v) in vals.into_iter().take(len).enumerate() {
            h[start + j] = v;
        }
        if h.iter().all(|&c| c == 0) {
            h[start] = 1;
        }
        h
    });
    prop_oneof![dense, sparse, band]
        .prop_filter("non-empty", |h| h.iter().any(|&c| c > 0))
        .prop_map(|h| h.try_into().unwrap())
}

/// Prediction/label pairs on a scale of 2..=10 points.
pub fn ordinal_case() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, u8)> {
    (2u8..=10).prop_flat_map(|n| {
        prop::collection::vec((1..=n, 1..=n), 1..60).prop_map(move |pairs| {
            let (p, l) = pairs.into_iter().unzip();
            (p, l, n)
        })
    })
}

/// Count vector, integer reference weights and a permutation seed.
pub fn bias_case() -> impl Strategy<Value = (Vec<u64>, Vec<i64>, Vec<usize>)> {
    (2usize..=8).prop_flat_map(|k| {
        (
            prop::collection::vec(0u64..200, k).prop_filter("non-empty", |c| c.iter().any(|&v| v > 0)),
            prop::collection::vec(1i64..30, k),
            Just((0..k).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

pub fn reference_from_weights(w: &[i64]) -> Reference {
    Reference { num: w.to_vec(), den: w.iter().sum() }
}

/// Logits for both heads, labels and alpha.
pub fn loss_case() -> impl Strategy<Value = (Vec<f64>, usize, Vec<f64>, Option<usize>, f64)> {
    (2usize..=10).prop_flat_map(|s| {
        (
            prop::collection::vec(-6.0f64..6.0, 6),
            0usize..6,
            prop::collection::vec(-6.0f64..6.0, s),
            prop::option::weighted(0.8, 0..s),
            0.0f64..=1.0,
        )
    })
}

/// A color histogram with up to 40 distinct colors.
pub fn color_histogram() -> impl Strategy<Value = BTreeMap<[u8; 3], u64>> {
    prop::collection::btree_map(any::<[u8; 3]>(), 1u64..500, 1..40)
}

/// A small image and skin mask.
pub fn masked_image() -> impl Strategy<Value = (u32, u32, Vec<[u8; 3]>, Vec<bool>, Vec<usize>)> {
    (2u32..12, 2u32..12).prop_flat_map(|(w, h)| {
        let n = (w * h) as usize;
        (
            Just(w),
            Just(h),
            prop::collection::vec(
                prop_oneof![Just([224u8, 172, 105]), Just([90, 56, 40]), Just([250, 230, 210]), any::<[u8; 3]>()],
                n,
            ),
            prop::collection::vec(prop::bool::weighted(0.7), n).prop_filter("some skin", |m| m.iter().any(|&b| b)),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

// Property checks.

pub fn prop_otsu(h: &[u64; 256]) -> Result<(), TestCaseError> {
    let got = otsu_threshold(h).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(got, otsu_oracle(h));
    Ok(())
}

fn scales(v: &[u8], n: u8) -> Vec<SkinToneScale> {
    v.iter().map(|&i| SkinToneScale::new(i, n).unwrap()).collect()
}

pub fn prop_tolerance_monotone(p: &[u8], l: &[u8], n: u8) -> Result<(), TestCaseError> {
    let (p, l) = (scales(p, n), scales(l, n));
    let mut prev = ordinal_metrics(&p, &l, 0, n).unwrap();
    for t in 1..n {
        let m = ordinal_metrics(&p, &l, t, n).unwrap();
        prop_assert!(m.accuracy >= prev.accuracy);
        prop_assert!(m.precision >= prev.precision - 1e-12);
        prop_assert!(m.recall >= prev.recall - 1e-12);
        prop_assert_eq!(m.mse, prev.mse);
        prev = m;
    }
    prop_assert_eq!(prev.accuracy, 1.0);
    Ok(())
}

pub fn prop_mse_unit(p: &[u8], l: &[u8], n: u8) -> Result<(), TestCaseError> {
    let m = ordinal_metrics(&scales(p, n), &scales(l, n), 0, n).unwrap();
    prop_assert!((0.0..=1.0).contains(&m.mse), "mse {}", m.mse);
    if p == l {
        prop_assert_eq!(m.mse, 0.0);
    }
    Ok(())
}

pub fn prop_bias_permutation(counts: &[u64], w: &[i64], perm: &[usize]) -> Result<(), TestCaseError> {
    let r = reference_from_weights(w);
    let p = r.as_f64();
    let base = representation_bias(&label_counts(counts), &p).unwrap();
    let pc: Vec<u64> = perm.iter().map(|&i| counts[i]).collect();
    let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
    let permuted = representation_bias(&label_counts(&pc), &pp).unwrap();
    prop_assert_eq!(base.to_bits(), permuted.to_bits());
    prop_assert!((0.0..=1.0).contains(&base));
    let v = four_fifths_verdict(&label_counts(counts), &p, 0.2).unwrap();
    let vp = four_fifths_verdict(&label_counts(&pc), &pp, 0.2).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        prop_assert_eq!(v.groups[i].biased, vp.groups[j].biased);
    }
    Ok(())
}

pub fn prop_bias_oracle(counts: &[u64], w: &[i64]) -> Result<(), TestCaseError> {
    let r = reference_from_weights(w);
    matches_oracle(counts, &r).map_err(TestCaseError::fail)
}

pub fn prop_flag_monotone(counts: &[u64], w: &[i64], t1: f64, t2: f64) -> Result<(), TestCaseError> {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let p = reference_from_weights(w).as_f64();
    let a = four_fifths_verdict(&label_counts(counts), &p, lo).unwrap();
    let b = four_fifths_verdict(&label_counts(counts), &p, hi).unwrap();
    for (x, y) in a.groups.iter().zip(&b.groups) {
        prop_assert!(x.biased || !y.biased, "flagged at {} but not at {}", hi, lo);
    }
    prop_assert!(!a.bias_fair || b.bias_fair);
    Ok(())
}

pub fn prop_z_uniform(k: usize) -> Result<(), TestCaseError> {
    let z = normalization_z(&vec![1.0 / k as f64; k]).unwrap();
    let want = BigRational::new(BigInt::from(2 * (k - 1)), BigInt::from(k)).to_f64().unwrap();
    prop_assert_eq!(z.to_bits(), want.to_bits());
    Ok(())
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-3)`; the floor keeps gradients
/// that vanish from dominating.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn prop_loss_gradient(
    t: &[f64],
    tl: usize,
    s: &[f64],
    sl: Option<usize>,
    alpha: f64,
) -> Result<(), TestCaseError> {
    let (_, gt, gs) = joint_loss_grad(t, tl, s, sl, alpha).unwrap();
    let h = 1e-6;
    let f = |t: &[f64], s: &[f64]| joint_loss(t, tl, s, sl, alpha).unwrap();
    for i in 0..t.len() {
        let (mut up, mut dn) = (t.to_vec(), t.to_vec());
        up[i] += h;
        dn[i] -= h;
        let num = (f(&up, s) - f(&dn, s)) / (2.0 * h);
        prop_assert!(rel_err(gt[i], num) <= GRAD_TOLERANCE, "topo[{}] {} vs {}", i, gt[i], num);
    }
    for i in 0..s.len() {
        let (mut up, mut dn) = (s.to_vec(), s.to_vec());
        up[i] += h;
        dn[i] -= h;
        let num = (f(t, &up) - f(t, &dn)) / (2.0 * h);
        prop_assert!(rel_err(gs[i], num) <= GRAD_TOLERANCE, "skin[{}] {} vs {}", i, gs[i], num);
    }
    Ok(())
}

pub fn prop_distribution_normalized(hist: &BTreeMap<[u8; 3], u64>, k: usize) -> Result<(), TestCaseError> {
    let palette = ScalePalette::monk();
    let d = distribution_from_histogram(hist, k, &palette).unwrap();
    prop_assert_eq!(d.weights.len(), palette.len());
    prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
    prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    prop_assert!(d.dominant.len() <= k);
    prop_assert!((d.dominant.iter().map(|c| c.area).sum::<f64>() - 1.0).abs() <= 1e-9);
    Ok(())
}

pub fn prop_distribution_scaling(hist: &BTreeMap<[u8; 3], u64>, k: usize, factor: u64) -> Result<(), TestCaseError> {
    let palette = ScalePalette::monk();
    let a = distribution_from_histogram(hist, k, &palette).unwrap();
    let scaled: BTreeMap<[u8; 3], u64> = hist.iter().map(|(&c, &n)| (c, n * factor)).collect();
    let b = distribution_from_histogram(&scaled, k, &palette).unwrap();
    for (x, y) in a.weights.iter().zip(&b.weights) {
        prop_assert!((x - y).abs() <= 1e-12);
    }
    let ra: Vec<_> = a.dominant.iter().map(|c| c.rgb).collect();
    let rb: Vec<_> = b.dominant.iter().map(|c| c.rgb).collect();
    prop_assert_eq!(ra, rb);
    Ok(())
}

pub fn prop_dominant_permutation(
    w: u32,
    h: u32,
    px: &[[u8; 3]],
    mask: &[bool],
    perm: &[usize],
) -> Result<(), TestCaseError> {
    let palette = ScalePalette::monk();
    let build = |order: &dyn Fn(usize) -> usize| {
        let mut img = RgbImage::new(w, h);
        let mut m = Vec::with_capacity(px.len());
        for i in 0..px.len() {
            let j = order(i);
            img.put_pixel(i as u32 % w, i as u32 / w, Rgb(px[j]));
            m.push(mask[j]);
        }
        // keep the raw raster so mask positions line up with pixels
        let mut face = FaceRegion::whole(&img);
        face.crop = img;
        let mut sm = segment_skin(&face);
        sm.mask = m;
        dominant_pixels(&face, &sm, 15, &palette).unwrap()
    };
    let a = build(&|i| i);
    let b = build(&|i| perm[i]);
    prop_assert_eq!(a, b);
    Ok(())
}

/// Runs `check` over `cases` inputs from `strategy`.
pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

/// The property suite as named results.
pub fn property_suite(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("otsu brute force", run(cases, histogram(), |h| prop_otsu(&h))),
        ("tolerance monotonicity", run(cases, ordinal_case(), |(p, l, n)| prop_tolerance_monotone(&p, &l, n))),
        ("mse in [0, 1]", run(cases, ordinal_case(), |(p, l, n)| prop_mse_unit(&p, &l, n))),
        (
            "bias permutation equivariance",
            run(cases, bias_case(), |(c, w, perm)| prop_bias_permutation(&c, &w, &perm)),
        ),
        ("bias oracle", run(cases, bias_case(), |(c, w, _)| prop_bias_oracle(&c, &w))),
        (
            "flag monotonicity",
            run(cases, (bias_case(), 0.01f64..0.99, 0.01f64..0.99), |((c, w, _), a, b)| {
                prop_flag_monotone(&c, &w, a, b)
            }),
        ),
        ("z of uniform-k", run(cases, 2usize..=64, prop_z_uniform)),
        (
            "loss gradient finite differences",
            run(cases, loss_case(), |(t, tl, s, sl, a)| prop_loss_gradient(&t, tl, &s, sl, a)),
        ),
        (
            "distribution normalization",
            run(cases, (color_histogram(), 1usize..=20), |(h, k)| prop_distribution_normalized(&h, k)),
        ),
        (
            "distribution count scaling",
            run(cases, (color_histogram(), 1usize..=20, 2u64..50), |(h, k, f)| prop_distribution_scaling(&h, k, f)),
        ),
        (
            "dominant pixel permutation invariance",
            run(cases, masked_image(), |(w, h, px, m, perm)| prop_dominant_permutation(w, h, &px, &m, &perm)),
        ),
    ]
}

/// Exact rational value as f64.
pub fn ratio(a: i64, b: i64) -> f64 {
    BigRational::new(BigInt::from(a), BigInt::from(b)).to_f64().unwrap()
}

