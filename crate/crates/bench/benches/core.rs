use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

use surveyscope::diagnostics::correlation_screen;
use surveyscope::ecv::{evaluate_frames, scored_leaves, EvalRequest};
use surveyscope::evalcore::auc;
use surveyscope::mapping::{sparsify_threshold, sparsify_top_m, MappingMatrix, MappingRow};
use surveyscope::rng;
use surveyscope::scoring::{build_scores, ScoringRule};
use surveyscope_bench::fixture;

fn dense_mapping(rows: usize, k: usize) -> MappingMatrix {
    let mut g = rng::stream(9, 0);
    let ids: Vec<String> = (0..k).map(|j| format!("s{j}")).collect();
    MappingMatrix::new(
        1,
        (0..rows)
            .map(|i| {
                let raw: Vec<f64> = (0..k).map(|_| g.random::<f64>()).collect();
                let tot: f64 = raw.iter().sum();
                let w: Vec<(&str, f64)> = ids.iter().zip(&raw).map(|(s, x)| (s.as_str(), x / tot)).collect();
                MappingRow::new(format!("i{i}"), &w)
            })
            .collect(),
    )
}

fn sparsify(c: &mut Criterion) {
    let w = dense_mapping(10_000, 8);
    c.bench_function("sparsify_threshold_10k", |b| b.iter(|| sparsify_threshold(black_box(&w), 0.1).unwrap()));
    c.bench_function("sparsify_top_m_10k", |b| b.iter(|| sparsify_top_m(black_box(&w), 2).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let mut g = rng::stream(3, 0);
    let probs: Vec<f64> = (0..10_000).map(|_| g.random()).collect();
    let labels: Vec<f64> = probs.iter().map(|p| if g.random::<f64>() < *p { 1.0 } else { 0.0 }).collect();
    c.bench_function("auc_10k", |b| b.iter(|| auc(black_box(&probs), black_box(&labels)).unwrap()));
}

fn study(c: &mut Criterion) {
    let f = fixture(2000);
    let data = &f.study.data;
    let w = &f.out.initial_mapping;
    c.bench_function("build_scores_2000", |b| b.iter(|| build_scores(black_box(data), w, ScoringRule::default(), None).unwrap()));

    let s = build_scores(data, w, ScoringRule::default(), None).unwrap();
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    c.bench_function("correlation_screen_2000", |b| b.iter(|| correlation_screen(black_box(&s), 0.8, &rows).unwrap()));

    let cols = scored_leaves(&f.out.taxonomy, w);
    let req = EvalRequest {
        mapping: w,
        columns: &cols,
        candidates: &cols,
        baseline_scores: &[],
    };
    let mut group = c.benchmark_group("ecv");
    group.sample_size(10);
    group.bench_function("evaluate_outer_folds_2000", |b| {
        b.iter(|| evaluate_frames(&f.study, &f.frames, &req, None, &f.cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sparsify, metrics, study);
criterion_main!(benches);
