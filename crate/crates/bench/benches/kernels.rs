use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lgl_core::cluster::{kmeans, KMeansConfig};
use lgl_core::encoder::{Architecture, EncoderParams};
use lgl_core::math::Matrix;
use lgl_core::metrics::{eer, hungarian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn encoder(c: &mut Criterion) {
    let params = EncoderParams::init(&Architecture::new(vec![16, 64, 64, 32]).unwrap(), 0).unwrap();
    let frames = random_matrix(30, 16, 1);
    let upstream = vec![0.1; 32];
    c.bench_function("encoder_forward_30x16", |b| b.iter(|| params.encode(&frames).unwrap()));
    c.bench_function("encoder_forward_backward_30x16", |b| {
        b.iter(|| params.encode_backward(&frames, &upstream).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let points = random_matrix(2000, 32, 2);
    let cfg = KMeansConfig {
        k: 40,
        restarts: 1,
        seed: 3,
        ..KMeansConfig::default()
    };
    c.bench_function("kmeans_2000x32_k40", |b| b.iter(|| kmeans(&points, &cfg).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let cost = random_matrix(40, 40, 4);
    c.bench_function("hungarian_40x40", |b| b.iter(|| hungarian(&cost).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels: Vec<bool> = (0..4000).map(|i| i % 2 == 0).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&t| rng.random_range(0.0..1.0) + if t { 0.3 } else { 0.0 })
        .collect();
    c.bench_function("eer_4000", |b| {
        b.iter_batched(|| scores.clone(), |s| eer(&s, &labels).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, encoder, clustering, metrics);
criterion_main!(benches);
