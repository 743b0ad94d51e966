//! Multiplication by APoT levels using only shifts and adds.
//!
//! Values are fixed-point integers `mantissa · 2^-frac_bits`. A weight level
//! `2^g · Σ ±2^-e` times an activation becomes a sum of left-shifted copies
//! of the activation mantissa. The weight scale is rounded down to a power of
//! two here; the leftover factor belongs to a per-channel rescale outside the
//! MAC loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{decompose_level, LevelSet, PotTerm};

/// Largest shift accepted by the helpers; beyond it every nonzero mantissa overflows.
const MAX_SHIFT: u32 = 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub mantissa: i64,
    pub frac_bits: u32,
}

impl FixedPoint {
    pub const ZERO: FixedPoint = FixedPoint {
        mantissa: 0,
        frac_bits: 0,
    };

    /// Exact encoding of `x` with `frac_bits` fractional bits.
    pub fn encode(x: f64, frac_bits: u32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Precision(format!("{x} is not finite")));
        }
        if frac_bits > MAX_SHIFT {
            return Err(Error::Precision(format!(
                "{frac_bits} fractional bits exceed {MAX_SHIFT}"
            )));
        }
        let scaled = x * (frac_bits as f64).exp2();
        if scaled.fract() != 0.0 {
            return Err(Error::Precision(format!(
                "{x} is not a multiple of 2^-{frac_bits}"
            )));
        }
        if scaled.abs() >= 2f64.powi(63) {
            return Err(Error::Overflow(format!(
                "{x} at 2^-{frac_bits} does not fit 64 bits"
            )));
        }
        Ok(FixedPoint {
            mantissa: scaled as i64,
            frac_bits,
        })
    }

    /// Exact encoding with the fewest fractional bits.
    pub fn from_f32_exact(x: f32) -> Result<Self> {
        let x = x as f64;
        (0..=MAX_SHIFT)
            .find_map(|f| FixedPoint::encode(x, f).ok())
            .ok_or_else(|| {
                Error::Precision(format!("{x} needs more than {MAX_SHIFT} fractional bits"))
            })
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 * (-(self.frac_bits as f64)).exp2()
    }

    /// Same value with `extra` more fractional bits.
    pub fn widen(self, extra: u32) -> Result<Self> {
        Ok(FixedPoint {
            mantissa: shl(self.mantissa, extra)?,
            frac_bits: self.frac_bits + extra,
        })
    }

    /// Canonical form: no trailing zero bits in the mantissa (zero has frac_bits 0).
    pub fn normalized(self) -> Self {
        if self.mantissa == 0 {
            return FixedPoint::ZERO;
        }
        let tz = self.mantissa.trailing_zeros().min(self.frac_bits);
        FixedPoint {
            mantissa: self.mantissa >> tz,
            frac_bits: self.frac_bits - tz,
        }
    }

    /// Bits needed for |mantissa|.
    pub fn magnitude_bits(self) -> u32 {
        64 - self.mantissa.unsigned_abs().leading_zeros()
    }
}

fn shl(m: i64, s: u32) -> Result<i64> {
    if m == 0 {
        return Ok(0);
    }
    if s > MAX_SHIFT {
        return Err(Error::Overflow(format!("shift by {s}")));
    }
    m.checked_mul(1i64 << s)
        .ok_or_else(|| Error::Overflow(format!("{m} << {s} exceeds 64 bits")))
}

/// `act · 2^gamma_exp · Σ terms` by shifts and adds only, with the exponent
/// budget `E` set to the largest term exponent.
pub fn shift_mac(act: FixedPoint, terms: &[PotTerm], gamma_exp: i32) -> Result<FixedPoint> {
    let e_max = terms.iter().map(|t| t.exponent).max().unwrap_or(0);
    shift_mac_with_budget(act, terms, gamma_exp, e_max)
}

/// Shift-and-add product against a common exponent budget `budget ≥ max e`.
///
/// The result mantissa is `Σ ±(act.mantissa << (budget − e))` at
/// `act.frac_bits + budget − gamma_exp` fractional bits. A negative
/// fractional count is folded into one more left shift so no bits are
/// dropped.
pub fn shift_mac_with_budget(
    act: FixedPoint,
    terms: &[PotTerm],
    gamma_exp: i32,
    budget: u32,
) -> Result<FixedPoint> {
    if terms.is_empty() {
        return Ok(FixedPoint::ZERO);
    }
    if let Some(t) = terms.iter().find(|t| t.exponent > budget) {
        return Err(Error::Domain(format!(
            "term exponent {} exceeds budget {budget}",
            t.exponent
        )));
    }
    let mut acc: i64 = 0;
    for t in terms {
        let shifted = shl(act.mantissa, budget - t.exponent)?;
        acc = if t.negative {
            acc.checked_sub(shifted)
        } else {
            acc.checked_add(shifted)
        }
        .ok_or_else(|| Error::Overflow("shift-add accumulation exceeds 64 bits".into()))?;
    }
    let frac = act.frac_bits as i64 + budget as i64 - gamma_exp as i64;
    if frac >= 0 {
        if frac > MAX_SHIFT as i64 {
            return Err(Error::Overflow(format!("{frac} fractional bits")));
        }
        Ok(FixedPoint {
            mantissa: acc,
            frac_bits: frac as u32,
        })
    } else {
        Ok(FixedPoint {
            mantissa: shl(acc, (-frac) as u32)?,
            frac_bits: 0,
        })
    }
}

/// Sums fixed-point values, aligning on the widest `frac_bits` by left shifts.
pub fn accumulate(values: &[FixedPoint]) -> Result<FixedPoint> {
    let frac = values.iter().map(|v| v.frac_bits).max().unwrap_or(0);
    let mut acc: i64 = 0;
    for v in values {
        let aligned = shl(v.mantissa, frac - v.frac_bits)?;
        acc = acc
            .checked_add(aligned)
            .ok_or_else(|| Error::Overflow("dot-product accumulation exceeds 64 bits".into()))?;
    }
    Ok(FixedPoint {
        mantissa: acc,
        frac_bits: frac,
    })
}

/// `Σ acts[i] · weights[i]` where each weight is given as its APoT terms.
pub fn shift_dot(
    acts: &[FixedPoint],
    weights: &[Vec<PotTerm>],
    gamma_exp: i32,
) -> Result<FixedPoint> {
    if acts.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} activations for {} weights",
            acts.len(),
            weights.len()
        )));
    }
    let products = acts
        .iter()
        .zip(weights)
        .map(|(&a, w)| shift_mac(a, w, gamma_exp))
        .collect::<Result<Vec<_>>>()?;
    accumulate(&products)
}

/// Exponent of the largest power of two not above `gamma`.
pub fn pow2_floor_exp(gamma: f32) -> Result<i32> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!(
            "scale {gamma} has no power-of-two floor"
        )));
    }
    let mut e = gamma.log2().floor() as i32;
    while (e as f64).exp2() > gamma as f64 {
        e -= 1;
    }
    while ((e + 1) as f64).exp2() <= gamma as f64 {
        e += 1;
    }
    Ok(e)
}

/// Fixed-point form of `2^gamma_exp · Σ terms`, used by the reference multiply.
fn weight_fixed(terms: &[PotTerm], gamma_exp: i32) -> Result<FixedPoint> {
    let Some(e_max) = terms.iter().map(|t| t.exponent).max() else {
        return Ok(FixedPoint::ZERO);
    };
    let raw: i64 = terms
        .iter()
        .map(|t| {
            let v = 1i64 << (e_max - t.exponent);
            if t.negative {
                -v
            } else {
                v
            }
        })
        .sum();
    let frac = e_max as i64 - gamma_exp as i64;
    if frac >= 0 {
        Ok(FixedPoint {
            mantissa: raw,
            frac_bits: frac as u32,
        })
    } else {
        Ok(FixedPoint {
            mantissa: shl(raw, (-frac) as u32)?,
            frac_bits: 0,
        })
    }
}

/// Reference product using one integer multiplication.
pub fn reference_product(act: FixedPoint, terms: &[PotTerm], gamma_exp: i32) -> Result<FixedPoint> {
    let w = weight_fixed(terms, gamma_exp)?;
    let mantissa = act
        .mantissa
        .checked_mul(w.mantissa)
        .ok_or_else(|| Error::Overflow("reference product exceeds 64 bits".into()))?;
    Ok(FixedPoint {
        mantissa,
        frac_bits: act.frac_bits + w.frac_bits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMismatch {
    pub activation: f32,
    pub weight: f32,
    pub shift: FixedPoint,
    pub reference: FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub activation_levels: usize,
    pub weight_levels: usize,
    pub pairs: usize,
    pub mismatches: usize,
    pub mismatches_positive: usize,
    pub mismatches_negative: usize,
    /// Power-of-two weight scale actually used, `2^weight_gamma_exp`.
    pub weight_gamma_exp: i32,
    /// Widest result mantissa seen, in magnitude bits.
    pub max_result_bits: u32,
    /// `act_bits + max_shift + ceil(log2 n) + 1`.
    pub width_bound: u32,
    pub first_mismatch: Option<ShiftMismatch>,
}

impl ShiftReport {
    pub fn render(&self) -> String {
        format!(
            "activation levels: {}\nweight levels: {}\npairs: {}\nmismatches: {} (+w: {}, -w: {})\n\
             weight scale: 2^{}\nmax result width: {} bits (bound {})\n",
            self.activation_levels,
            self.weight_levels,
            self.pairs,
            self.mismatches,
            self.mismatches_positive,
            self.mismatches_negative,
            self.weight_gamma_exp,
            self.max_result_bits,
            self.width_bound
        )
    }
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

/// Compares shift-and-add against the reference product for every pair of
/// activation level and weight level. Mismatches are counted, not raised.
pub fn compare_all_pairs(weights: &LevelSet, activations: &[f32]) -> Result<ShiftReport> {
    let g = pow2_floor_exp(weights.gamma)?;
    let decomposed = weights
        .levels()
        .iter()
        .map(|&w| decompose_level(w, weights).map(|d| (w, d.terms)))
        .collect::<Result<Vec<_>>>()?;
    compare_pairs(&decomposed, weights.n_terms(), g, activations)
}

/// Pairwise check over explicit weight decompositions `(level, terms)` at scale `2^gamma_exp`.
pub fn compare_pairs(
    weights: &[(f32, Vec<PotTerm>)],
    n_terms: usize,
    gamma_exp: i32,
    activations: &[f32],
) -> Result<ShiftReport> {
    let acts = activations
        .iter()
        .map(|&a| FixedPoint::from_f32_exact(a).map(FixedPoint::normalized))
        .collect::<Result<Vec<_>>>()?;
    let act_bits = acts.iter().map(|a| a.magnitude_bits()).max().unwrap_or(0);
    let max_shift = weights
        .iter()
        .flat_map(|(_, t)| t.iter().map(|p| p.exponent))
        .max()
        .unwrap_or(0);
    let mut report = ShiftReport {
        activation_levels: acts.len(),
        weight_levels: weights.len(),
        pairs: 0,
        mismatches: 0,
        mismatches_positive: 0,
        mismatches_negative: 0,
        weight_gamma_exp: gamma_exp,
        max_result_bits: 0,
        width_bound: act_bits + max_shift + ceil_log2(n_terms) + 1,
        first_mismatch: None,
    };
    for (&a_val, &a) in activations.iter().zip(&acts) {
        for (w_val, terms) in weights {
            let got = shift_mac(a, terms, gamma_exp)?;
            let want = reference_product(a, terms, gamma_exp)?;
            report.pairs += 1;
            report.max_result_bits = report.max_result_bits.max(got.magnitude_bits());
            if got.normalized() != want.normalized() {
                report.mismatches += 1;
                if *w_val < 0.0 {
                    report.mismatches_negative += 1;
                } else {
                    report.mismatches_positive += 1;
                }
                report.first_mismatch.get_or_insert(ShiftMismatch {
                    activation: a_val,
                    weight: *w_val,
                    shift: got,
                    reference: want,
                });
            }
        }
    }
    Ok(report)
}

/// [`compare_all_pairs`] that fails on the first mismatching pair.
pub fn verify_equivalence(weights: &LevelSet, activations: &[f32]) -> Result<ShiftReport> {
    let report = compare_all_pairs(weights, activations)?;
    if let Some(m) = &report.first_mismatch {
        return Err(Error::Verification(format!(
            "activation {} x weight {}: shift-add gave {:?}, reference {:?} ({} mismatches)",
            m.activation, m.weight, m.shift, m.reference, report.mismatches
        )));
    }
    Ok(report)
}
