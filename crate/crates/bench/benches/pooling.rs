use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poolleak_bench::{ascending, descending};
use poolleak_core::nn::{maxpool_forward, PoolWindow};
use poolleak_core::PoolVariant;
use std::hint::black_box;

fn pooling(c: &mut Criterion) {
    let window = PoolWindow::square(3, 2, 0);
    let mut group = c.benchmark_group("maxpool_32x32x32");
    for (name, input) in [("ascending", ascending(32, 32, 32)), ("descending", descending(32, 32, 32))] {
        for variant in [PoolVariant::NaiveBranchy, PoolVariant::ConstantTime] {
            group.bench_with_input(BenchmarkId::new(variant.label(), name), &input, |b, x| {
                b.iter(|| maxpool_forward(black_box(x), &window, variant).expect("valid window"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, pooling);
criterion_main!(benches);
