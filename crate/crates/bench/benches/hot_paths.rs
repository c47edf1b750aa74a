use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fairlens_core::color::{detect_face, dominant_pixels, median_cut, otsu_threshold, segment_skin, Histogram};
use fairlens_core::fairness::{four_fifths_verdict, representation_bias, LabelCounts};
use fairlens_core::prompts::DemographicAxis;
use fairlens_core::scale::{Rgb, ScalePalette};
use fairlens_core::synth::{mock_image, MockConfig};
use fairlens_core::topology::{extract_features, TopologyConfig, TopologyModel};

fn otsu(c: &mut Criterion) {
    let mut hist: Histogram = [0; 256];
    for (i, h) in hist.iter_mut().enumerate() {
        *h = ((i * 7919) % 1013) as u64;
    }
    c.bench_function("otsu_threshold", |b| b.iter(|| otsu_threshold(black_box(&hist))));
}

fn color_branch(c: &mut Criterion) {
    let (img, _) = mock_image("A doctor, portrait, natural light", 3, &MockConfig::default());
    let face = detect_face(&img).expect("mock face");
    let mask = segment_skin(&face);
    let palette = ScalePalette::monk();
    let mut hist: BTreeMap<Rgb, u64> = BTreeMap::new();
    for p in face.crop.pixels() {
        *hist.entry(p.0).or_default() += 1;
    }
    c.bench_function("median_cut_k15", |b| b.iter(|| median_cut(black_box(&hist), 15)));
    c.bench_function("detect_face_256", |b| b.iter(|| detect_face(black_box(&img))));
    c.bench_function("dominant_pixels", |b| b.iter(|| dominant_pixels(black_box(&face), &mask, 15, &palette)));
}

fn cnn(c: &mut Criterion) {
    let (img, _) = mock_image("A nurse, portrait, natural light", 5, &MockConfig::default());
    let crop = detect_face(&img).expect("mock face").crop;
    let small = TopologyModel::new(&TopologyConfig::small());
    let full = TopologyModel::new(&TopologyConfig::default());
    c.bench_function("cnn_forward_small", |b| b.iter(|| extract_features(&small, black_box(&crop))));
    c.bench_function("cnn_forward_default", |b| b.iter(|| extract_features(&full, black_box(&crop))));
}

fn bias(c: &mut Criterion) {
    let counts = LabelCounts::new(DemographicAxis::Skintone, vec![120, 340, 95, 260, 185]);
    let p = [0.2; 5];
    c.bench_function("representation_bias_5", |b| b.iter(|| representation_bias(black_box(&counts), &p)));
    c.bench_function("four_fifths_verdict_5", |b| b.iter(|| four_fifths_verdict(black_box(&counts), &p, 0.2)));
}

criterion_group!(benches, otsu, color_branch, cnn, bias);
criterion_main!(benches);
