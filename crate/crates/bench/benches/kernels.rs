use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use prm_bench::{pruned_lenet, tensor};
use prm_core::admm::{project_structured, StructuredBudget};
use prm_core::layers::conv2d_forward;
use prm_core::purify::{compact, propagate_unused_paths, purify, ThresholdSet, Thresholds};

fn conv(c: &mut Criterion) {
    // LeNet-5 conv2 on a batch of 64 pooled maps
    let x = tensor(&[64, 20, 12, 12], 1);
    let w = tensor(&[50, 20, 5, 5], 2);
    let b = tensor(&[50], 3);
    c.bench_function("conv2d_forward 64x20x12x12 * 50x20x5x5", |bench| {
        bench.iter(|| conv2d_forward(black_box(&x), &w, &b).unwrap())
    });
}

fn projection(c: &mut Criterion) {
    let w = tensor(&[500, 800], 4);
    let budget = StructuredBudget {
        layer: "fc1".into(),
        filters: Some(25),
        columns: Some(200),
    };
    c.bench_function("project_structured 500x800 rows+cols", |bench| {
        bench.iter(|| project_structured(black_box(&w), &budget).unwrap())
    });
}

fn purification(c: &mut Criterion) {
    let g = pruned_lenet();
    let th = ThresholdSet::uniform(Thresholds {
        th1: 1e-4,
        th2: 0.5,
        th3: 1e-3,
        th4: 1e-3,
    });
    c.bench_function("propagate_unused_paths lenet5 tier1", |bench| {
        bench.iter(|| propagate_unused_paths(black_box(&g)).unwrap())
    });
    c.bench_function("purify lenet5 tier1", |bench| bench.iter(|| purify(black_box(&g), &th)));
    let (clean, _) = propagate_unused_paths(&g).unwrap();
    c.bench_function("compact lenet5 tier1", |bench| {
        bench.iter(|| compact(black_box(&clean)).unwrap())
    });
}

criterion_group!(benches, conv, projection, purification);
criterion_main!(benches);
