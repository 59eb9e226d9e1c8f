use std::hint::black_box;

use aqade_bench::images;
use aqade_core::cae::random_weights;
use aqade_core::{build_model, ModelSpec};
use criterion::{criterion_group, criterion_main, Criterion, Throughput};

fn inference(c: &mut Criterion) {
    let mut g = c.benchmark_group("cae");
    g.sample_size(10);
    for channels in [1, 3] {
        let spec = ModelSpec::new(channels).unwrap();
        let model = build_model(spec, &random_weights(&spec, 1)).unwrap();
        let batch = images(2, 8, channels);
        let one = batch.slab(0).unwrap();
        g.bench_function(format!("encode_c{channels}"), |b| {
            b.iter(|| model.encode(black_box(&one)).unwrap())
        });
        g.bench_function(format!("forward_c{channels}"), |b| {
            b.iter(|| model.forward(black_box(&one)).unwrap())
        });
        g.throughput(Throughput::Elements(8));
        g.bench_function(format!("extract_batch8_c{channels}"), |b| {
            b.iter(|| model.extract_batch(black_box(&batch)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, inference);
criterion_main!(benches);
