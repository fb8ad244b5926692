use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use weave_core::TextureField;

fn bake(c: &mut Criterion) {
    let field = TextureField::with_defaults(0);
    let mut group = c.benchmark_group("bake");
    group.sample_size(10);
    for res in [256usize, 512, 1024] {
        group.throughput(Throughput::Elements((res * res) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(res), &res, |b, &r| {
            b.iter(|| field.bake((r, r), 256, None))
        });
    }
    group.finish();
}

criterion_group!(benches, bake);
criterion_main!(benches);
