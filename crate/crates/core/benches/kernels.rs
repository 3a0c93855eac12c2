//! Kernel timings. Run once with default features (rayon) and once with
//! `--no-default-features` (sequential); group names carry the mode.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dkn_core::filtering::{bicubic_resize, deformable_weighted_average, GridSpec, KernelField, OffsetField};
use dkn_core::inference::{refine, shift_and_stitch};
use dkn_core::model::{ModelConfig, Network};
use dkn_core::parallel::MODE;
use dkn_core::tensor::{conv2d, ConvSpec};
use dkn_core::Tensor;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random([1, 64, 64, 64], &mut rng, 1.0);
    let w = random([64, 64, 3, 3], &mut rng, 0.05);
    let mut g = c.benchmark_group(format!("conv3x3-64ch-64px/{MODE}"));
    g.sample_size(20);
    g.bench_function("forward", |b| {
        b.iter(|| conv2d(black_box(&x), &w, None, ConvSpec { stride: 1, padding: 1 }).unwrap())
    });
    g.finish();
}

fn deform(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = GridSpec::new(3).unwrap();
    let (h, w) = (128, 128);
    let target = random([1, 1, h, w], &mut rng, 1.0);
    let raw = random([1, 9, h, w], &mut rng, 1.0);
    // subtract the per-pixel tap mean so the field is a valid residual kernel
    let kernels = Tensor::from_fn([1, 9, h, w], |_, t, y, x| {
        let mean: f32 = (0..9).map(|s| raw.at(0, s, y, x)).sum::<f32>() / 9.0;
        raw.at(0, t, y, x) - mean
    });
    let offsets = random([1, 18, h, w], &mut rng, 2.0);
    let (kf, of) = (KernelField(kernels), OffsetField(offsets));
    let mut g = c.benchmark_group(format!("deformable-average-128px/{MODE}"));
    g.sample_size(20);
    g.bench_function("k3", |b| b.iter(|| deformable_weighted_average(black_box(&target), &kf, &of, grid, true).unwrap()));
    g.finish();
}

fn networks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (64, 64);
    let guide = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen_range(0.0..1.0f32));
    let depth = bicubic_resize(&Tensor::from_fn([1, 1, h / 4, w / 4], |_, _, _, _| rng.gen_range(0.0..1.0f32)), h, w);
    let dkn = Network::<f32>::new(ModelConfig::dkn(), 0).unwrap();
    let fdkn = Network::<f32>::new(ModelConfig::fdkn(), 0).unwrap();
    let mut g = c.benchmark_group(format!("inference-64px/{MODE}"));
    g.sample_size(10);
    g.bench_function("dkn-shift-and-stitch", |b| b.iter(|| shift_and_stitch(&dkn, Some(&guide), black_box(&depth)).unwrap()));
    g.bench_function("fdkn-refine", |b| b.iter(|| refine(&fdkn, Some(&guide), black_box(&depth)).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, deform, networks);
criterion_main!(benches);
