//! Microbenchmarks for the hot inner-loop operations: loss evaluation,
//! perturbation application, detection-batch assembly, and detector passes.

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;

use softmark_core::detector::{build_detector, make_detection_batch, InputMode, DEFAULT_HIDDEN_WIDTHS};
use softmark_core::losses::{kld_loss_grad, main_task_loss_grad};
use softmark_core::signal::{apply_perturbation, generate_signal, OutputBatch, SourceTag};

const ROWS: usize = 256;
const CLASSES: usize = 10;

fn batch(tag: SourceTag, seed: u64) -> OutputBatch {
    // A cheap deterministic pseudo-random fill; distribution details do not
    // matter for throughput measurements.
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let scores = Array2::from_shape_fn((ROWS, CLASSES), |_| {
        state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
        ((state >> 33) as f32 / (1u64 << 31) as f32) * 8.0 - 4.0
    });
    OutputBatch::new(scores, tag).unwrap()
}

fn bench_losses(c: &mut Criterion) {
    let o_n = batch(SourceTag::Normal, 1);
    let o_wm = batch(SourceTag::Watermarked, 2);
    let labels: Vec<usize> = (0..ROWS).map(|i| i % CLASSES).collect();

    c.bench_function("kld_loss_grad/256x10", |b| {
        b.iter(|| kld_loss_grad(black_box(&o_n), black_box(&o_wm), 4.0).unwrap())
    });
    c.bench_function("main_task_loss_grad/256x10", |b| {
        b.iter(|| main_task_loss_grad(black_box(&o_wm), black_box(&labels)).unwrap())
    });
}

fn bench_signal(c: &mut Criterion) {
    let o_wm = batch(SourceTag::Watermarked, 3);
    let mut signal = generate_signal(CLASSES, 0, 0.2).unwrap();
    signal.gamma = 2.0;
    c.bench_function("apply_perturbation/256x10", |b| {
        b.iter(|| apply_perturbation(black_box(&o_wm), black_box(&signal)).unwrap())
    });
}

fn bench_detector(c: &mut Criterion) {
    let o_n = batch(SourceTag::Normal, 4);
    let o_wm = batch(SourceTag::Watermarked, 5);
    c.bench_function("make_detection_batch/256x10", |b| {
        b.iter(|| make_detection_batch(black_box(&o_wm), black_box(&o_n), InputMode::Raw, 0).unwrap())
    });

    let detector = build_detector(CLASSES, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 0).unwrap();
    c.bench_function("detector_detect/256x10", |b| {
        b.iter(|| detector.detect(black_box(&o_wm)).unwrap())
    });

    let dbatch = make_detection_batch(&o_wm, &o_n, InputMode::Raw, 0).unwrap();
    c.bench_function("detector_train_batch/512x10", |b| {
        b.iter_batched(
            || build_detector(CLASSES, &DEFAULT_HIDDEN_WIDTHS, InputMode::Raw, 0).unwrap(),
            |mut d| d.train_batch(black_box(&dbatch)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_losses, bench_signal, bench_detector);
criterion_main!(benches);
