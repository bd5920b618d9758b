//! Microbenchmarks for the pipeline's hot paths: convolution forward and
//! backward (the bulk of training time), the masked loss, random-field
//! draws, and the interpolation baseline.

use std::hint::black_box;

use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cloudpatch::baseline::interpolate_image;
use cloudpatch::maskgen::{apply_mask, threshold_mask, GrfConfig, GrfSampler};
use cloudpatch::raster::MultibandImage;
use cloudpatch::tensor::{conv2d, conv2d_backward, masked_mse, MaskTensor, Tensor4};

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// First CNN layer shape: 64x64, 8 bands plus gap indicator ignored, 16 filters.
fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, h, w, c_in, c_out) = (1, 64, 64, 8, 16);
    let input = Tensor4::from_vec(n, h, w, c_in, rand_vec(&mut rng, n * h * w * c_in)).unwrap();
    let kernel = rand_vec(&mut rng, 9 * c_in * c_out);
    let bias = rand_vec(&mut rng, c_out);
    c.bench_function("conv2d forward 64x64 8->16", |b| {
        b.iter(|| conv2d(black_box(&input), &kernel, &bias, c_out).unwrap())
    });
    let grad = Tensor4::from_vec(n, h, w, c_out, rand_vec(&mut rng, n * h * w * c_out)).unwrap();
    c.bench_function("conv2d backward 64x64 8->16", |b| {
        b.iter(|| conv2d_backward(black_box(&input), &kernel, c_out, &grad).unwrap())
    });
}

fn bench_masked_mse(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, h, w, ch) = (1, 64, 64, 8);
    let len = n * h * w * ch;
    let y_true = Tensor4::from_vec(n, h, w, ch, rand_vec(&mut rng, len)).unwrap();
    let y_pred = Tensor4::from_vec(n, h, w, ch, rand_vec(&mut rng, len)).unwrap();
    let cells: Vec<u8> = (0..len).map(|_| u8::from(rng.random::<f64>() < 0.1)).collect();
    let vm = MaskTensor::new(n, h, w, ch, cells).unwrap();
    c.bench_function("masked_mse 64x64x8", |b| {
        b.iter(|| masked_mse(black_box(&y_true), black_box(&y_pred), &vm).unwrap())
    });
}

fn bench_grf_draw(c: &mut Criterion) {
    let sampler = GrfSampler::new(64, 64, GrfConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("grf");
    group.sample_size(20);
    group.bench_function("draw 64x64", |b| b.iter(|| sampler.sample(&mut rng)));
    group.finish();
}

fn bench_baseline_fill(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let date = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    let (h, w, bands) = (64, 64, 8);
    let mut img = MultibandImage::filled(date, h, w, bands, 0.0);
    for v in img.values_mut() {
        *v = rng.random_range(0.0f32..0.5);
    }
    let field: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let mask = threshold_mask(&field, h, w, 0.1).unwrap();
    let gapped = apply_mask(&img, &mask).unwrap();
    c.bench_function("baseline fill 64x64x8 10% gaps", |b| {
        b.iter(|| interpolate_image(black_box(&gapped)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_masked_mse,
    bench_grf_draw,
    bench_baseline_fill
);
criterion_main!(benches);
