//! Geometric-median filter selection against a brute-force subset search.

use proptest::prelude::*;
use prq_core::nn::QConv2d;
use prq_core::prune::{
    apply_mask, filter_distance_sums, gm_mask, pruned_count, select_prune_set,
    select_prune_set_extending,
};
use prq_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn counts_floor_the_product() {
    assert_eq!(pruned_count(0.3, 10), 3);
    assert_eq!(pruned_count(0.15, 16), 2);
    assert_eq!(pruned_count(0.3, 16), 4);
    assert_eq!(pruned_count(0.3, 64), 19);
    assert_eq!(pruned_count(0.0, 64), 0);
    assert_eq!(pruned_count(0.99, 3), 2);
}

#[test]
fn matches_brute_force_on_random_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        let dims = rng.random_range(1..=18);
        let w = random_layer(&mut rng, n, dims);
        let rate = rng.random_range(0.0..0.95);
        let scores = filter_distance_sums(&w).unwrap();
        for (j, s) in scores.iter().enumerate() {
            assert!((s - distance_sum(&w, j)).abs() <= 1e-9 * s.max(1.0));
        }
        if has_near_tie(&scores, 1e-9) {
            continue;
        }
        let mask = select_prune_set("l", &scores, rate).unwrap();
        assert_eq!(
            mask.pruned(),
            brute_force(&w, pruned_count(rate, n)),
            "n={n} rate={rate}"
        );
        checked += 1;
    }
    assert!(checked > 150, "only {checked} tie-free layers");
}

#[test]
fn ties_prefer_the_lower_index() {
    // Four identical filters all score the same.
    let w = Tensor::new(&[4, 1, 1, 1], vec![1.0; 4]).unwrap();
    let scores = filter_distance_sums(&w).unwrap();
    assert_eq!(
        select_prune_set("l", &scores, 0.5).unwrap().pruned(),
        vec![0, 1]
    );
}

#[test]
fn duplicated_filter_goes_first() {
    // Two copies of the centre point and two far points; the copies are the median.
    let w = Tensor::new(&[4, 2, 1, 1], vec![5.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0]).unwrap();
    let scores = filter_distance_sums(&w).unwrap();
    assert_eq!(
        select_prune_set("l", &scores, 0.5).unwrap().pruned(),
        vec![1, 3]
    );
}

#[test]
fn invalid_inputs() {
    let one = Tensor::new(&[1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
    assert!(matches!(
        filter_distance_sums(&one),
        Err(Error::Degenerate { .. })
    ));
    assert!(matches!(
        select_prune_set("l", &[1.0, 2.0], 1.0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        select_prune_set("l", &[1.0, 2.0], -0.1),
        Err(Error::Config(_))
    ));
    let conv = QConv2d::new("solo", one, 1, 0).unwrap();
    match gm_mask(&conv, 0.3, None) {
        Err(Error::Degenerate { layer, .. }) => assert_eq!(layer, "solo"),
        other => panic!("expected a degenerate-layer error, got {other:?}"),
    }
}

#[test]
fn apply_mask_zeroes_exactly_the_pruned_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::new(
        &[6, 2, 3, 3],
        (0..108).map(|_| rng.random_range(0.1f32..1.0)).collect(),
    )
    .unwrap();
    let mut conv = QConv2d::new("c", w.clone(), 1, 1).unwrap();
    let mask = gm_mask(&conv, 0.5, None).unwrap();
    assert_eq!(mask.pruned_count, 3);
    apply_mask(&mut conv, mask.clone(), true).unwrap();
    for j in 0..6 {
        let zeroed = filter(&conv.weight, j).iter().all(|&v| v == 0.0);
        assert_eq!(zeroed, mask.is_pruned(j));
        if !zeroed {
            assert_eq!(filter(&conv.weight, j), filter(&w, j));
        }
    }
}

proptest! {
    #[test]
    fn permutation_equivariant(seed in any::<u64>(), n in 2usize..9, dims in 1usize..10, rate in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_layer(&mut rng, n, dims);
        let scores = filter_distance_sums(&w).unwrap();
        prop_assume!(!has_near_tie(&scores, 1e-9));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut data = Vec::with_capacity(w.numel());
        for &p in &perm {
            data.extend_from_slice(filter(&w, p));
        }
        let permuted = Tensor::new(w.shape(), data).unwrap();
        let pscores = filter_distance_sums(&permuted).unwrap();
        let original = select_prune_set("l", &scores, rate).unwrap();
        let moved = select_prune_set("l", &pscores, rate).unwrap();
        let mut mapped: Vec<usize> = moved.pruned().iter().map(|&i| perm[i]).collect();
        mapped.sort();
        prop_assert_eq!(mapped, original.pruned());
    }

    #[test]
    fn scale_invariant(seed in any::<u64>(), n in 2usize..9, dims in 1usize..10, rate in 0.0f64..0.9, c in 1e-3f32..=10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_layer(&mut rng, n, dims);
        let scores = filter_distance_sums(&w).unwrap();
        // Scaling in f32 perturbs each score by roughly one part in 10^7.
        prop_assume!(!has_near_tie(&scores, 1e-5));
        let scaled = filter_distance_sums(&w.map(|v| v * c)).unwrap();
        prop_assert_eq!(
            select_prune_set("l", &scores, rate).unwrap().pruned(),
            select_prune_set("l", &scaled, rate).unwrap().pruned()
        );
    }

    #[test]
    fn extending_keeps_the_prior(seed in any::<u64>(), n in 2usize..17, r1 in 0.0f64..0.5, extra in 0.0f64..0.45) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = random_layer(&mut rng, n, 4);
        let later = random_layer(&mut rng, n, 4);
        let prior = select_prune_set("l", &filter_distance_sums(&first).unwrap(), r1).unwrap();
        let r2 = r1 + extra;
        let next = select_prune_set_extending("l", &filter_distance_sums(&later).unwrap(), r2, &prior).unwrap();
        prop_assert!(prior.is_subset_of(&next));
        prop_assert_eq!(next.pruned_count, pruned_count(r2, n));
        prop_assert_eq!(next.pruned().len(), next.pruned_count);
    }
}
