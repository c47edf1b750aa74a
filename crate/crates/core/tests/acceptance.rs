//! Acceptance criteria 1-9. Each test prints one PASS/FAIL line to stderr,
//! bypassing the test harness's output capture.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use fairlens_core::fairness::{aggregate_report, normalization_z, AxisScores};
use fairlens_core::generation::{ModelSpec, RetryPolicy};
use fairlens_core::pipeline::{
    evaluate_stage, generate_stage, label_stage, report_stage, train_skintone_stage, train_topology_stage, RunConfig,
    SkinToneCorpus,
};
use fairlens_core::prompts::{build_suite, suite_to_jsonl, PromptKind, SuiteConfig, TermLists};
use fairlens_core::report::CSV_COLUMNS;
use fairlens_core::scale::SkinToneScale;
use fairlens_core::skintone::{ordinal_metrics, FusionConfig};
use fairlens_core::synth::MockConfig;
use fairlens_core::topology::TopologyConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned limits.
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const OTSU_BUDGET: Duration = Duration::from_secs(10);
const PIPELINE_BUDGET: Duration = Duration::from_secs(600);
const MSE_TOLERANCE: f64 = 1e-12;
const AGGREGATE_TOLERANCE: f64 = 1e-3;
const BIAS_TOLERANCE: f64 = 1e-9;
const PRECISION_MARGIN: f64 = 0.10;

fn verdict(criterion: u8, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {criterion} [{}] {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_metric_oracle() {
    let start = Instant::now();
    let references = [
        Reference::uniform(2),
        Reference { num: vec![7, 3], den: 10 },
        Reference::uniform(3),
        Reference { num: vec![4, 3, 3], den: 10 },
        Reference::uniform(5),
    ];
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for r in &references {
        let k = r.num.len();
        for n in 1..=20 {
            for counts in compositions(n, k) {
                checked += 1;
                if let Err(e) = matches_oracle(&counts, r) {
                    failures.push(e);
                }
            }
        }
        // The one-hot normalizer is the largest deviation any sample reaches.
        let (z_num, z_den) = oracle_z(r);
        for n in 1..=6u64 {
            let best = compositions(n, k)
                .iter()
                .map(|c| {
                    c.iter()
                        .zip(&r.num)
                        .map(|(&x, &a)| num_bigint::BigInt::from((x as i64 * r.den - a * n as i64).abs()))
                        .sum::<num_bigint::BigInt>()
                })
                .max()
                .unwrap();
            // best / (n d) == z_num / z_den with z_den == d
            if best != z_num.clone() * num_bigint::BigInt::from(n) || z_den != num_bigint::BigInt::from(r.den) {
                failures.push(format!("normalizer of {:?} differs from the sample maximum at N={n}", r.num));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < ORACLE_BUDGET;
    let detail = match failures.first() {
        Some(f) => format!("{} mismatches of {checked}; first: {f}", failures.len()),
        None => format!("{checked} count vectors bitwise equal in {:.1}s", elapsed.as_secs_f64()),
    };
    verdict(1, "bias and four-fifths flags match brute force", pass, &detail);
}

#[test]
fn criterion_2_normalization_values() {
    let mut bad = Vec::new();
    let z2 = normalization_z(&[0.5, 0.5]).unwrap();
    if z2 != 1.0 {
        bad.push(format!("Z(uniform-2) = {z2}"));
    }
    let z5 = normalization_z(&[0.2; 5]).unwrap();
    if z5 != 1.6 {
        bad.push(format!("Z(uniform-5) = {z5}"));
    }
    for k in 2..=10usize {
        let z = normalization_z(&vec![1.0 / k as f64; k]).unwrap();
        let want = ratio(2 * (k as i64 - 1), k as i64);
        if z.to_bits() != want.to_bits() {
            bad.push(format!("Z(uniform-{k}) = {z:e}, want {want:e}"));
        }
    }
    let detail = if bad.is_empty() { "Z(uniform-k) = 2(k-1)/k exactly for k = 2..=10".to_string() } else { bad.join("; ") };
    verdict(2, "normalization values", bad.is_empty(), &detail);
}

#[test]
fn criterion_3_normalized_mse() {
    let s = |v: &[u8]| v.iter().map(|&i| SkinToneScale::new(i, 10).unwrap()).collect::<Vec<_>>();
    let worst = ordinal_metrics(&s(&[10]), &s(&[1]), 0, 10).unwrap().mse;
    let small = ordinal_metrics(&s(&[4, 5]), &s(&[3, 5]), 0, 10).unwrap().mse;
    let pass = worst == 1.0 && (small - 1.0 / 162.0).abs() <= MSE_TOLERANCE;
    verdict(3, "normalized MSE", pass, &format!("single maximal error -> {worst}; (3,5) vs (4,5) -> {small:e}"));
}

#[test]
fn criterion_4_otsu_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start = Instant::now();
    let mut mismatches = 0;
    for i in 0..1000 {
        let mut h = [0u64; 256];
        match i % 4 {
            0 => h.iter_mut().for_each(|c| *c = rng.random_range(0..1000)),
            1 => {
                for _ in 0..rng.random_range(1..6) {
                    h[rng.random_range(0..256)] += rng.random_range(1..100_000);
                }
            }
            2 => {
                // two noisy modes
                for _ in 0..5000 {
                    let centre = if rng.random_bool(0.4) { 70.0 } else { 180.0 };
                    let v: f64 = centre + rng.random_range(-30.0..30.0) + rng.random_range(-30.0..30.0);
                    h[v.clamp(0.0, 255.0) as usize] += 1;
                }
            }
            _ => {
                let lo = rng.random_range(0..250);
                let hi = rng.random_range(lo + 1..=255);
                for c in &mut h[lo..=hi] {
                    *c = rng.random_range(0..3);
                }
                h[lo] += 1;
            }
        }
        let got = fairlens_core::color::otsu_threshold(&h).unwrap();
        if got != otsu_oracle(&h) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && elapsed < OTSU_BUDGET;
    verdict(
        4,
        "Otsu threshold equals brute-force maximum",
        pass,
        &format!("{mismatches} mismatches over 1000 histograms in {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_5_skintone_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out: dir.path().to_path_buf(), parallelism: 1, ..Default::default() };
    cfg.training.per_group_train = 100;
    cfg.training.per_group_test = 20;
    cfg.training.image_size = 160;
    cfg.training.topology = TopologyConfig { max_epochs: 6, ..TopologyConfig::small() };
    cfg.training.skintone_corpus = SkinToneCorpus::ThreeClass;
    cfg.training.three_class_train = 1166;
    cfg.training.three_class_test = 292;
    cfg.training.fusion = FusionConfig::three_class();
    cfg.validate().unwrap();
    train_topology_stage(&cfg).unwrap();
    let s = train_skintone_stage(&cfg).unwrap();
    let fusion = s.fusion.expect("test split scored").precision;
    let baseline = s.baseline.expect("test split scored").precision;
    let pass = s.train_samples == 1166 && s.test_samples == 292 && fusion - baseline >= PRECISION_MARGIN;
    verdict(
        5,
        "fusion classifier beats the color baseline",
        pass,
        &format!("tolerance-0 precision {fusion:.4} vs baseline {baseline:.4} on 292 test images"),
    );
}

#[test]
fn criterion_6_aggregation() {
    let a = aggregate_report(&AxisScores {
        bias_gender: 0.589,
        bias_skintone: 0.497,
        error_gender: 0.027,
        error_skintone: 0.708,
    });
    let close = |x: f64, y: f64| (x - y).abs() <= AGGREGATE_TOLERANCE;
    let pass = close(a.bias_mean, 0.543) && close(a.error_mean, 0.368) && close(a.overall_mean, 0.455);
    verdict(
        6,
        "aggregate means",
        pass,
        &format!("bias {:.4}, error {:.4}, overall {:.4}", a.bias_mean, a.error_mean, a.overall_mean),
    );
}

#[test]
fn criterion_7_mock_pipeline() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out: dir.path().to_path_buf(), parallelism: 2, ..Default::default() };
    cfg.training.topology = TopologyConfig { max_epochs: 6, ..TopologyConfig::small() };
    let mut model = ModelSpec::mock("mock", 10);
    model.mock = MockConfig { male_fraction: 0.7, fixed_scale: Some(9), ..MockConfig::default() };
    cfg.models = vec![model];
    cfg.validate().unwrap();

    train_topology_stage(&cfg).unwrap();
    train_skintone_stage(&cfg).unwrap();
    let suite: Vec<_> = build_suite(&TermLists::default_terms(), &SuiteConfig::default())
        .unwrap()
        .into_iter()
        .filter(|p| p.kind == PromptKind::Representation)
        .take(100)
        .collect();
    assert_eq!(suite.len(), 100);
    std::fs::write(cfg.suite_path(), suite_to_jsonl(&suite)).unwrap();
    let generated = generate_stage(&cfg, None, RetryPolicy::default()).unwrap();
    label_stage(&cfg).unwrap();
    let reports = evaluate_stage(&cfg).unwrap();
    let files = report_stage(&cfg).unwrap();
    let elapsed = start.elapsed();

    let r = &reports[0];
    let b_g = r.bias_gender.unwrap_or(f64::NAN);
    let csv = std::fs::read_to_string(&files.csv).unwrap();
    let header_ok = csv.lines().next() == Some(CSV_COLUMNS.join(",").as_str());
    let pass = generated[0].1.ok == 1000
        && (b_g - 0.4).abs() <= BIAS_TOLERANCE
        && r.gender_counts.counts == [700, 300]
        && r.skintone_counts.counts == [0, 0, 0, 0, 1000]
        && header_ok
        && elapsed < PIPELINE_BUDGET;
    verdict(
        7,
        "mock pipeline recovers the constructed composition",
        pass,
        &format!(
            "b_g = {b_g}, gender {:?}, skintone {:?}, {} images, {:.0}s including training",
            r.gender_counts.counts,
            r.skintone_counts.counts,
            generated[0].1.ok,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_property_suites() {
    let results = property_suite(CASES);
    let failed: Vec<String> =
        results.iter().filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}"))).collect();
    let detail = if failed.is_empty() {
        format!("{} properties x {CASES} cases", results.len())
    } else {
        failed.join("; ")
    };
    verdict(8, "property suites", failed.is_empty(), &detail);
}

#[test]
fn criterion_9_scope() {
    // Reproducing published per-model scores needs external generators; the
    // report schema and the metric arithmetic above are what is checked.
    let expected = [
        "model",
        "bias_gender",
        "bias_skintone",
        "error_gender",
        "error_skintone",
        "skintone_mse",
        "bias_mean",
        "error_mean",
        "overall_mean",
        "verdict_gender_groups",
        "verdict_skintone_groups",
        "verdict_bias",
        "verdict_alignment",
    ];
    let pass = CSV_COLUMNS == expected;
    verdict(
        9,
        "report schema (full-scale model reproduction out of scope)",
        pass,
        "schema fixed; per-model numbers for external generators not reproduced",
    );
}
