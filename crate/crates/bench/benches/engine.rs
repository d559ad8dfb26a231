use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use earn_bench::bench_model;
use earn_core::numkernel::{matmul, FlopCounter, Matrix};
use earn_core::runtime::prefill;
use earn_core::SequenceLayout;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = Matrix::from_vec(n, n, (0..n * n).map(|i| (i % 13) as f32 * 0.1).collect()).unwrap();
        let b = a.clone();
        let flops = FlopCounter::new();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b), &flops).unwrap())
        });
    }
    group.finish();
}

fn bench_prefill(c: &mut Criterion) {
    let (config, spec, weights) = bench_model();
    let prompt: Vec<u32> = (0..510).map(|i| (i % config.vocab_size) as u32).collect();
    let mut group = c.benchmark_group("prefill_512");
    group.sample_size(10);
    group.bench_function("vanilla", |b| {
        let vanilla = spec.without_pruning(config.num_layers);
        b.iter(|| {
            let layout = SequenceLayout::assemble(&vanilla, &prompt, config.vocab_size);
            prefill(&weights, &config, &vanilla, layout).unwrap()
        })
    });
    group.bench_function("pruned", |b| {
        b.iter(|| {
            let layout = SequenceLayout::assemble(&spec, &prompt, config.vocab_size);
            prefill(&weights, &config, &spec, layout).unwrap()
        })
    });
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let (config, spec, weights) = bench_model();
    let prompt: Vec<u32> = (0..510).map(|i| (i % config.vocab_size) as u32).collect();
    let mut group = c.benchmark_group("decode_step_after_512");
    group.sample_size(20);
    for (name, s) in [("vanilla", spec.without_pruning(config.num_layers)), ("pruned", spec)] {
        group.bench_function(name, |b| {
            let layout = SequenceLayout::assemble(&s, &prompt, config.vocab_size);
            let mut session = prefill(&weights, &config, &s, layout).unwrap();
            b.iter(|| session.decode_step(black_box(3)).unwrap().len())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_prefill, bench_decode);
criterion_main!(benches);
