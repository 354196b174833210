use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use lpx_core::attack::IncrementalNet;
use lpx_core::cnn::{forward_batch, init_params, Mode};
use lpx_core::linegen::generate_dataset;
use lpx_core::BitGrid;

fn generate(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    for (dim, step) in [(32, 1.0), (80, 2.0)] {
        g.bench_function(BenchmarkId::from_parameter(format!("d{dim}_step{step}")), |b| {
            b.iter(|| generate_dataset(dim, step).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_eval");
    for dim in [16, 32, 64] {
        let ds = generate_dataset(dim, 2.0).unwrap();
        let params = init_params(dim, 1).unwrap();
        let batch: Vec<&BitGrid> = ds.images.iter().take(64).map(|i| &i.bits).collect();
        g.throughput(Throughput::Elements(batch.len() as u64));
        g.bench_function(BenchmarkId::from_parameter(dim), |b| {
            b.iter(|| forward_batch(&params, &batch, Mode::Eval, 0.0, None).unwrap())
        });
    }
    g.finish();
}

fn incremental_flip(c: &mut Criterion) {
    let mut g = c.benchmark_group("incremental_flip");
    for dim in [32, 80] {
        let ds = generate_dataset(dim, 2.0).unwrap();
        let params = init_params(dim, 1).unwrap();
        let net = IncrementalNet::new(&params).unwrap();
        let src = net.source(&ds.images[ds.len() / 3].bits).unwrap();
        let pixels: Vec<(usize, usize)> = (0..dim * dim).step_by(7).map(|k| (k / dim, k % dim)).collect();
        g.throughput(Throughput::Elements(pixels.len() as u64));
        g.bench_function(BenchmarkId::from_parameter(dim), |b| {
            b.iter(|| {
                for &(r, c) in &pixels {
                    criterion::black_box(net.flip_probs(&src, r, c).unwrap());
                }
            })
        });
    }
    g.finish();
}

criterion_group!(benches, generate, forward, incremental_flip);
criterion_main!(benches);
