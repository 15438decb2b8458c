// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ea_lab_bench::score_matrix;
use ea_lab_core::AttentionKernelSpec;

fn weights(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_weights");
    for n in [16, 56, 128] {
        let z = score_matrix(n);
        for (label, kernel) in [("dpa", AttentionKernelSpec::dpa(1.0)), ("ea", AttentionKernelSpec::ea())] {
            group.bench_with_input(BenchmarkId::new(label, n), &z, |b, z| b.iter(|| kernel.weights(black_box(z)).unwrap()));
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_backward");
    let n = 56;
    let z = score_matrix(n);
    let da = score_matrix(n).scale(0.1);
    for (label, kernel) in [("dpa", AttentionKernelSpec::dpa(1.0)), ("ea", AttentionKernelSpec::ea())] {
        let a = kernel.weights(&z).unwrap();
        group.bench_function(label, |b| b.iter(|| kernel.weights_backward(black_box(&z), &a, &da).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, weights, backward);
criterion_main!(benches);
