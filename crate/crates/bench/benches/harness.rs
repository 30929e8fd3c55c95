use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use drivecot_bench::{camera_set, long_answer};
use drivecot_core::parse::{parse_decision, parse_objects};
use drivecot_core::{build_prompt, load_manifest, merge_panorama, PromptStrategy, TaskKind};

fn parsing(c: &mut Criterion) {
    let mut group = c.benchmark_group("parse");
    for objects in [4, 64] {
        let text = long_answer(objects);
        group.throughput(Throughput::Bytes(text.len() as u64));
        group.bench_with_input(BenchmarkId::new("objects", objects), &text, |b, t| {
            b.iter(|| parse_objects(black_box(t)))
        });
        group.bench_with_input(BenchmarkId::new("decision", objects), &text, |b, t| {
            b.iter(|| parse_decision(black_box(t)))
        });
    }
    group.finish();
}

fn panorama(c: &mut Criterion) {
    let mut group = c.benchmark_group("merge_panorama");
    for (w, h) in [(320, 240), (1600, 900)] {
        let cams = camera_set(w, h);
        group.throughput(Throughput::Elements(6 * u64::from(w * h)));
        group.bench_with_input(BenchmarkId::from_parameter(format!("{w}x{h}")), &cams, |b, cams| {
            b.iter(|| merge_panorama(black_box(cams)).unwrap())
        });
    }
    group.finish();
}

fn prompts(c: &mut Criterion) {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/ablation/manifest.jsonl");
    let sample = load_manifest(&manifest).unwrap().swap_remove(0);
    let mut group = c.benchmark_group("build_prompt");
    for strategy in PromptStrategy::ALL {
        group.bench_function(strategy.slug(), |b| {
            b.iter(|| build_prompt(strategy, black_box(&sample), &[], TaskKind::Decision).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, parsing, panorama, prompts);
criterion_main!(benches);
