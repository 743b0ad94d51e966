//! Independent oracles shared by the module suites and the acceptance gate.
#![allow(dead_code)]

use num_rational::Ratio;
use prq_core::quant::{PotTerm, QuantConfig};
use prq_core::FixedPoint;
use prq_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every (b, k) pair the quantizer accepts.
pub const SUPPORTED: [(u32, u32); 7] = [(2, 1), (2, 2), (3, 1), (4, 1), (4, 2), (8, 1), (8, 2)];

/// Unsigned and signed variants of every supported pair.
pub fn configs() -> Vec<QuantConfig> {
    SUPPORTED
        .iter()
        .flat_map(|&(b, k)| [QuantConfig::unsigned(b, k), QuantConfig::signed(b, k)])
        .collect()
}

pub type Q = Ratio<i64>;

pub fn pow2_neg(e: u32) -> Q {
    Q::new(1, 1i64 << e)
}

/// Raw magnitude sums for `bits` magnitude bits at base width `k`, as exact
/// rationals. Full-width terms come first and a narrower remainder term last.
pub fn raw_oracle(bits: u32, k: u32) -> Vec<Q> {
    let mut widths = vec![k; (bits / k) as usize];
    if bits % k != 0 {
        widths.push(bits % k);
    }
    let n = widths.len() as u32;
    let mut sums = vec![Q::from_integer(0)];
    for (i, w) in widths.iter().enumerate() {
        let mut choices = vec![Q::from_integer(0)];
        choices.extend((0..(1u32 << w) - 1).map(|j| pow2_neg(i as u32 + j * n)));
        sums = sums
            .iter()
            .flat_map(|s| choices.iter().map(move |c| s + c))
            .collect();
    }
    sums.sort();
    sums.dedup();
    sums
}

pub fn oracle_levels(cfg: &QuantConfig, gamma: f32) -> Vec<f32> {
    let mag_bits = if cfg.signed { cfg.bits - 1 } else { cfg.bits };
    let raw = raw_oracle(mag_bits, cfg.base_bits);
    let scaled = |r: &Q| (gamma as f64 * (*r.numer() as f64 / *r.denom() as f64)) as f32;
    let mut out: Vec<f32> = Vec::new();
    if cfg.signed {
        out.extend(
            raw.iter()
                .rev()
                .filter(|r| **r > Q::from_integer(0))
                .map(|r| -scaled(r)),
        );
    }
    out.extend(raw.iter().map(scaled));
    out
}

/// Argmin over all levels of |clamp(x) − l|, ties toward the smaller magnitude.
pub fn argmin_oracle(x: f32, levels: &[f32]) -> f32 {
    let mut best = levels[0];
    for &l in levels {
        let (d, db) = ((x as f64 - l as f64).abs(), (x as f64 - best as f64).abs());
        if d < db || (d == db && l.abs() < best.abs()) {
            best = l;
        }
    }
    best
}

pub fn random_layer(rng: &mut ChaCha8Rng, filters: usize, dims: usize) -> Tensor {
    let data = (0..filters * dims)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    Tensor::new(&[filters, dims, 1, 1], data).unwrap()
}

pub fn filter(w: &Tensor, j: usize) -> &[f32] {
    let len = w.numel() / w.shape()[0];
    &w.data()[j * len..(j + 1) * len]
}

/// Σ over every other filter of the Euclidean distance, one filter at a time.
pub fn distance_sum(w: &Tensor, j: usize) -> f64 {
    (0..w.shape()[0])
        .map(|o| {
            filter(w, j)
                .iter()
                .zip(filter(w, o))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Searches every subset of size `k` for the smallest total score; ties go to
/// the lexicographically smallest index set.
pub fn brute_force(w: &Tensor, k: usize) -> Vec<usize> {
    let n = w.shape()[0];
    let scores: Vec<f64> = (0..n).map(|j| distance_sum(w, j)).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u32..1 << n {
        if bits.count_ones() as usize != k {
            continue;
        }
        let set: Vec<usize> = (0..n).filter(|j| bits >> j & 1 == 1).collect();
        let total: f64 = set.iter().map(|&j| scores[j]).sum();
        let better = match &best {
            None => true,
            Some((t, s)) => total < *t - 1e-12 || ((total - t).abs() <= 1e-12 && set < *s),
        };
        if better {
            best = Some((total, set));
        }
    }
    best.unwrap().1
}

/// True when two scores are too close for the ranking to be stable under rounding.
pub fn has_near_tie(scores: &[f64], rel: f64) -> bool {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2)
        .any(|w| w[1] - w[0] <= rel * w[1].abs().max(1.0))
}

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the difference stencil.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x`, compared entry by entry with `analytic`.
pub fn check(x: &Tensor<f64>, analytic: &[f64], f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Direct 7-loop convolution with explicit bounds checks.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

pub type R = Ratio<i128>;

/// Exact value of a finite f32, by doubling until the fraction vanishes.
pub fn exact(x: f32) -> R {
    let mut v = x as f64;
    let mut den = 1i128;
    while v.fract() != 0.0 {
        v *= 2.0;
        den *= 2;
    }
    R::new(v as i128, den)
}

pub fn pow2(e: i32) -> R {
    if e >= 0 {
        R::from_integer(1i128 << e)
    } else {
        R::new(1, 1i128 << -e)
    }
}

pub fn fixed(v: FixedPoint) -> R {
    R::new(v.mantissa as i128, 1i128 << v.frac_bits)
}

pub fn weight_value(terms: &[PotTerm], g: i32) -> R {
    terms
        .iter()
        .map(|t| {
            if t.negative {
                -pow2(-(t.exponent as i32))
            } else {
                pow2(-(t.exponent as i32))
            }
        })
        .sum::<R>()
        * pow2(g)
}
