//! Shift-and-add products checked against exact rational arithmetic.

use proptest::prelude::*;
use prq_core::quant::{build_level_set, decompose_level, PotTerm, QuantConfig};
use prq_core::shift::{
    compare_all_pairs, pow2_floor_exp, shift_dot, shift_mac, verify_equivalence,
};
use prq_core::{Error, FixedPoint};

mod common;
use common::*;

fn term_strategy() -> impl Strategy<Value = Vec<PotTerm>> {
    proptest::collection::vec((any::<bool>(), 0u32..12), 0..4).prop_map(|v| {
        v.into_iter()
            .map(|(negative, exponent)| PotTerm { negative, exponent })
            .collect()
    })
}

#[test]
fn every_pair_matches_rational_product() {
    for b in [2, 4] {
        for k in [1, 2] {
            for signed in [false, true] {
                for (w_alpha, a_alpha) in [(1.0f32, 1.0f32), (0.37, 2.5), (3.3, 0.05)] {
                    let wcfg = QuantConfig {
                        signed,
                        ..QuantConfig::unsigned(b, k)
                    };
                    let weights = build_level_set(&wcfg, w_alpha).unwrap();
                    let acts = build_level_set(&QuantConfig::unsigned(b, k), a_alpha).unwrap();
                    let g = pow2_floor_exp(weights.gamma).unwrap();
                    for &w in weights.levels() {
                        let terms = decompose_level(w, &weights).unwrap().terms;
                        for &a in acts.levels() {
                            let got = shift_mac(FixedPoint::from_f32_exact(a).unwrap(), &terms, g)
                                .unwrap();
                            assert_eq!(
                                fixed(got),
                                exact(a) * weight_value(&terms, g),
                                "b={b} k={k} a={a} w={w}"
                            );
                        }
                    }
                    let report = verify_equivalence(&weights, acts.levels()).unwrap();
                    assert_eq!(report.pairs, weights.len() * acts.len());
                    assert!(report.max_result_bits <= report.width_bound);
                }
            }
        }
    }
}

#[test]
fn power_of_two_scale_makes_levels_exact() {
    // With gamma rounded to 2^g the shift product is exactly a · 2^g · Σ, and
    // that weight value is a dyadic rational the fixed-point encoder can hold.
    let weights = build_level_set(&QuantConfig::signed(4, 2), 1.0).unwrap();
    let g = pow2_floor_exp(weights.gamma).unwrap();
    for &w in weights.levels() {
        let terms = decompose_level(w, &weights).unwrap().terms;
        let v = weight_value(&terms, g);
        let as_f64 = *v.numer() as f64 / *v.denom() as f64;
        let enc = FixedPoint::from_f32_exact(as_f64 as f32).unwrap();
        assert_eq!(fixed(enc), v);
        assert_eq!(enc.to_f64(), as_f64);
    }
}

#[test]
fn report_counts_without_raising() {
    let weights = build_level_set(&QuantConfig::unsigned(2, 1), 1.0).unwrap();
    let acts = [0.0f32, 0.5, 0.75];
    let r = compare_all_pairs(&weights, &acts).unwrap();
    assert_eq!((r.pairs, r.mismatches), (12, 0));
    assert!(r.render().contains("mismatches: 0"));
}

#[test]
fn overflow_and_precision_errors() {
    let big = FixedPoint {
        mantissa: i64::MAX / 2,
        frac_bits: 0,
    };
    let terms = [
        PotTerm {
            negative: false,
            exponent: 0,
        },
        PotTerm {
            negative: false,
            exponent: 5,
        },
    ];
    assert!(matches!(shift_mac(big, &terms, 0), Err(Error::Overflow(_))));
    assert!(matches!(
        FixedPoint::encode(0.3, 10),
        Err(Error::Precision(_))
    ));
    assert!(matches!(
        FixedPoint::encode(f64::NAN, 10),
        Err(Error::Precision(_))
    ));
    assert!(matches!(pow2_floor_exp(0.0), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn f32_encoding_round_trips(x in -1e6f32..1e6) {
        let enc = FixedPoint::from_f32_exact(x);
        // Values needing more than 62 fractional bits are rejected rather than rounded.
        if let Ok(enc) = enc {
            prop_assert_eq!(enc.to_f64(), x as f64);
            prop_assert_eq!(fixed(enc), exact(x));
            prop_assert_eq!(enc.normalized().to_f64(), x as f64);
        }
    }

    #[test]
    fn single_products_are_exact(m in -100_000i64..100_000, f in 0u32..20, terms in term_strategy(), g in -8i32..8) {
        let act = FixedPoint { mantissa: m, frac_bits: f };
        let got = shift_mac(act, &terms, g).unwrap();
        prop_assert_eq!(fixed(got), fixed(act) * weight_value(&terms, g));
    }

    #[test]
    fn dot_products_are_exact(pairs in proptest::collection::vec((-5000i64..5000, 0u32..16, term_strategy()), 1..12), g in -6i32..6) {
        let acts: Vec<FixedPoint> = pairs.iter().map(|&(m, f, _)| FixedPoint { mantissa: m, frac_bits: f }).collect();
        let weights: Vec<Vec<PotTerm>> = pairs.iter().map(|p| p.2.clone()).collect();
        let want: R = acts.iter().zip(&weights).map(|(&a, w)| fixed(a) * weight_value(w, g)).sum();
        prop_assert_eq!(fixed(shift_dot(&acts, &weights, g).unwrap()), want);
    }

    #[test]
    fn pow2_floor_brackets_the_scale(gamma in 1e-6f32..1e6) {
        let e = pow2_floor_exp(gamma).unwrap();
        prop_assert!((e as f64).exp2() <= gamma as f64);
        prop_assert!(((e + 1) as f64).exp2() > gamma as f64);
    }
}
