use std::hint::black_box;

use bricklayer::losses::{isolation_loss, LossConfig};
use bricklayer::numerics::RngStream;
use bricklayer::sur::select_sur;
use bricklayer_bench::{default_backbone, random_matrix};
use criterion::{criterion_group, criterion_main, Criterion};

fn sur(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let feats = random_matrix(&mut rng, 1000, 16);
    let stability: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
    c.bench_function("select_sur n=1000 n_r=64", |b| {
        b.iter(|| select_sur(black_box(&feats), black_box(&stability), 64).unwrap())
    });
}

fn isolation(c: &mut Criterion) {
    let mut rng = RngStream::new(2);
    let feats = random_matrix(&mut rng, 48, 16);
    let labels: Vec<u32> = (0..48).map(|i| (i % 8) as u32).collect();
    let cfg = LossConfig::default();
    c.bench_function("isolation_loss 48x16, 8 domains", |b| {
        b.iter(|| isolation_loss(black_box(&feats), black_box(&labels), &cfg).unwrap())
    });
}

fn backbone(c: &mut Criterion) {
    let net = default_backbone(3);
    let mut rng = RngStream::new(4);
    let x = random_matrix(&mut rng, 32, 128);
    let up = random_matrix(&mut rng, 32, 16);
    c.bench_function("backbone forward 32x128", |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    c.bench_function("backbone forward+backward 32x128", |b| {
        b.iter(|| {
            let cache = net.forward_cached(black_box(&x)).unwrap();
            net.backward(&cache, black_box(&up)).unwrap()
        })
    });
}

criterion_group!(benches, sur, isolation, backbone);
criterion_main!(benches);
