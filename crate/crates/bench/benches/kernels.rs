use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use prq_core::ops::{conv2d_forward, conv2d_grads};
use prq_core::prune::{filter_distance_sums, select_prune_set};
use prq_core::quant::{build_level_set, decompose_level, quantize_nearest, QuantConfig};
use prq_core::shift::{pow2_floor_exp, shift_dot};
use prq_core::{FixedPoint, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[32, 16, 16, 16], &mut rng);
    let w = random(&[32, 16, 3, 3], &mut rng);
    let b = random(&[32], &mut rng);
    let up = random(&[32, 32, 16, 16], &mut rng);
    c.bench_function("conv3x3 forward 32x16x16x16 -> 32", |bn| {
        bn.iter(|| conv2d_forward(black_box(&x), &w, Some(&b), 1, 1).unwrap())
    });
    c.bench_function("conv3x3 backward 32x16x16x16 -> 32", |bn| {
        bn.iter(|| conv2d_grads(black_box(&x), &w, &up, 1, 1).unwrap())
    });
}

fn quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<f32> = (0..65_536)
        .map(|_| rng.random_range(-1.2f32..1.2))
        .collect();
    for (bits, k) in [(2, 1), (4, 2), (8, 2)] {
        let set = build_level_set(&QuantConfig::signed(bits, k), 1.0).unwrap();
        c.bench_function(&format!("quantize 64k signed b{bits}k{k}"), |bn| {
            bn.iter(|| xs.iter().map(|&x| quantize_nearest(x, &set)).sum::<f32>())
        });
    }
}

fn gm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[64, 64, 3, 3], &mut rng);
    c.bench_function("gm scores + selection 64x576", |bn| {
        bn.iter(|| {
            select_prune_set("l", &filter_distance_sums(black_box(&w)).unwrap(), 0.3).unwrap()
        })
    });
}

fn shift(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = build_level_set(&QuantConfig::signed(4, 2), 0.8).unwrap();
    let acts = build_level_set(&QuantConfig::unsigned(4, 2), 1.0).unwrap();
    let g = pow2_floor_exp(weights.gamma).unwrap();
    let n = 576;
    let pick = |set: &[f32], rng: &mut ChaCha8Rng| set[rng.random_range(0..set.len())];
    let a: Vec<FixedPoint> = (0..n)
        .map(|_| FixedPoint::from_f32_exact(pick(acts.levels(), &mut rng)).unwrap())
        .collect();
    let t: Vec<_> = (0..n)
        .map(|_| {
            decompose_level(pick(weights.levels(), &mut rng), &weights)
                .unwrap()
                .terms
        })
        .collect();
    c.bench_function("shift-add dot 576 b4k2", |bn| {
        bn.iter_batched(
            || (a.clone(), t.clone()),
            |(a, t)| shift_dot(&a, &t, g).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, quantize, gm, shift);
criterion_main!(benches);
