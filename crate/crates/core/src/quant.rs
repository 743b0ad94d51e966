//! Additive powers-of-two (APoT) quantization.
//!
//! A level is `γ · Σ P_i` with `n = b / k` additive terms. Term `i` is either
//! zero or `2^-(i + j·n)` for `j ∈ 0..2^k − 1`, so every exponent appears in
//! exactly one term and every combination of terms yields a distinct sum.
//! Signed sets spend one bit on the sign and build magnitudes from `b − 1`
//! bits; since zero is shared by both halves they hold `2^b − 1` values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bit-width that disables quantization entirely.
pub const PASSTHROUGH_BITS: u32 = 32;

/// Clipping threshold used when a tensor is identically zero.
pub const DEGENERATE_ALPHA: f32 = f32::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipPolicy {
    #[default]
    MaxAbs,
    /// q-th percentile of |x|, `0 < q ≤ 100`.
    Percentile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Total bit-width `b`.
    pub bits: u32,
    /// Base bit-width `k` of each additive term.
    #[serde(default = "default_base_bits")]
    pub base_bits: u32,
    #[serde(default)]
    pub signed: bool,
    #[serde(default)]
    pub clip: ClipPolicy,
}

fn default_base_bits() -> u32 {
    2
}

impl QuantConfig {
    pub fn unsigned(bits: u32, base_bits: u32) -> Self {
        QuantConfig {
            bits,
            base_bits,
            signed: false,
            clip: ClipPolicy::MaxAbs,
        }
    }

    pub fn signed(bits: u32, base_bits: u32) -> Self {
        QuantConfig {
            bits,
            base_bits,
            signed: true,
            clip: ClipPolicy::MaxAbs,
        }
    }

    pub fn passthrough(signed: bool) -> Self {
        QuantConfig {
            bits: PASSTHROUGH_BITS,
            base_bits: 1,
            signed,
            clip: ClipPolicy::MaxAbs,
        }
    }

    /// Same configuration at a different total bit-width.
    pub fn with_bits(self, bits: u32) -> Self {
        QuantConfig { bits, ..self }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    /// Number of additive terms `n = b / k`.
    pub fn terms(&self) -> usize {
        (self.bits / self.base_bits.max(1)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if let ClipPolicy::Percentile(q) = self.clip {
            if !(q > 0.0 && q <= 100.0) {
                return Err(Error::Config(format!("percentile {q} outside (0, 100]")));
            }
        }
        if self.is_passthrough() {
            return Ok(());
        }
        if !matches!(self.base_bits, 1 | 2) {
            return Err(Error::Config(format!(
                "unsupported base bit-width k={} (supported: 1, 2)",
                self.base_bits
            )));
        }
        if !matches!(self.bits, 2 | 3 | 4 | 8) {
            return Err(Error::Config(format!(
                "unsupported bit-width b={} (supported: 2, 3, 4, 8, or {PASSTHROUGH_BITS} for passthrough)",
                self.bits
            )));
        }
        if self.bits % self.base_bits != 0 {
            return Err(Error::Config(format!(
                "b={} is not divisible by k={}",
                self.bits, self.base_bits
            )));
        }
        Ok(())
    }

    /// Bits given to each additive term of the magnitude.
    fn term_widths(&self) -> Vec<u32> {
        let magnitude_bits = if self.signed {
            self.bits - 1
        } else {
            self.bits
        };
        let k = self.base_bits;
        let mut widths = vec![k; (magnitude_bits / k) as usize];
        if magnitude_bits % k != 0 {
            widths.push(magnitude_bits % k);
        }
        widths
    }
}

/// One signed power-of-two term `±2^-exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotTerm {
    pub negative: bool,
    pub exponent: u32,
}

impl PotTerm {
    pub fn value(&self) -> f32 {
        let v = (-(self.exponent as f32)).exp2();
        if self.negative {
            -v
        } else {
            v
        }
    }
}

/// A level written as `gamma · Σ terms`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub gamma: f32,
    pub terms: Vec<PotTerm>,
}

impl Decomposition {
    pub fn rebuild(&self) -> f32 {
        let raw: f32 = self.terms.iter().map(PotTerm::value).sum();
        self.gamma * raw
    }
}

/// Realized, sorted quantization levels for one `(config, α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    pub gamma: f32,
    pub alpha: f32,
    pub signed: bool,
    levels: Vec<f32>,
    terms: Vec<Vec<PotTerm>>,
    n_terms: usize,
}

impl LevelSet {
    pub fn levels(&self) -> &[f32] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Number of additive terms used for magnitudes.
    pub fn n_terms(&self) -> usize {
        self.n_terms
    }

    pub fn max_level(&self) -> f32 {
        *self.levels.last().expect("level sets are never empty")
    }

    fn clamp(&self, x: f32) -> f32 {
        let lo = if self.signed { -self.max_level() } else { 0.0 };
        x.clamp(lo, self.max_level())
    }

    /// Whether a straight-through gradient passes at `x`.
    pub fn in_range(&self, x: f32) -> bool {
        let lo = if self.signed { -self.alpha } else { 0.0 };
        x >= lo && x <= self.alpha
    }

    pub fn quantize(&self, x: f32) -> f32 {
        quantize_nearest(x, self)
    }
}

/// Enumerates every combination of terms for the configured magnitude bits.
fn raw_magnitudes(config: &QuantConfig) -> (Vec<(f32, Vec<PotTerm>)>, usize) {
    let widths = config.term_widths();
    let n = widths.len();
    let mut combos: Vec<(f32, Vec<PotTerm>)> = vec![(0.0, Vec::new())];
    for (i, &w) in widths.iter().enumerate() {
        let choices = (1u32 << w) - 1;
        let mut next = Vec::with_capacity(combos.len() * (choices as usize + 1));
        for (sum, terms) in &combos {
            next.push((*sum, terms.clone()));
            for j in 0..choices {
                let term = PotTerm {
                    negative: false,
                    exponent: i as u32 + j * n as u32,
                };
                let mut t = terms.clone();
                t.push(term);
                next.push((sum + term.value(), t));
            }
        }
        combos = next;
    }
    for (_, t) in combos.iter_mut() {
        t.sort_by_key(|p| p.exponent);
    }
    combos.sort_by(|a, b| a.0.total_cmp(&b.0));
    (combos, n)
}

/// Builds the level set with the largest magnitude level equal to `alpha`.
pub fn build_level_set(config: &QuantConfig, alpha: f32) -> Result<LevelSet> {
    config.validate()?;
    if config.is_passthrough() {
        return Err(Error::Config(
            "passthrough configuration has no quantization levels".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "clipping threshold must be positive and finite, got {alpha}"
        )));
    }
    let (mags, n_terms) = raw_magnitudes(config);
    let max_raw = mags.last().map(|m| m.0).unwrap_or(0.0);
    let mut gamma = alpha / max_raw;
    while gamma * max_raw > alpha {
        gamma = gamma.next_down();
    }

    let mut levels = Vec::with_capacity(mags.len() * 2);
    let mut terms = Vec::with_capacity(mags.len() * 2);
    if config.signed {
        for (raw, t) in mags.iter().rev().filter(|m| m.0 > 0.0) {
            levels.push(gamma * -raw);
            terms.push(
                t.iter()
                    .map(|p| PotTerm {
                        negative: true,
                        ..*p
                    })
                    .collect(),
            );
        }
    }
    for (raw, t) in mags {
        levels.push(gamma * raw);
        terms.push(t);
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "levels for b={} k={} collapse at alpha={alpha}",
            config.bits, config.base_bits
        )));
    }
    Ok(LevelSet {
        gamma,
        alpha,
        signed: config.signed,
        levels,
        terms,
        n_terms,
    })
}

/// Nearest level to `clamp(x)`; ties go toward zero.
pub fn quantize_nearest(x: f32, set: &LevelSet) -> f32 {
    let x = set.clamp(x);
    let levels = &set.levels;
    let idx = levels.partition_point(|&l| l < x);
    if idx == 0 {
        return levels[0];
    }
    if idx == levels.len() {
        return levels[idx - 1];
    }
    let (lo, hi) = (levels[idx - 1], levels[idx]);
    // f64 differences of f32 values are exact, so ties are detected exactly.
    let (d_lo, d_hi) = (x as f64 - lo as f64, hi as f64 - x as f64);
    if d_lo < d_hi {
        lo
    } else if d_hi < d_lo {
        hi
    } else if lo.abs() <= hi.abs() {
        lo
    } else {
        hi
    }
}

/// Writes `level` as `γ · Σ ±2^-e`.
pub fn decompose_level(level: f32, set: &LevelSet) -> Result<Decomposition> {
    let idx = set
        .levels
        .binary_search_by(|l| l.total_cmp(&level))
        .map_err(|_| Error::Domain(format!("{level} is not a level of this set")))?;
    Ok(Decomposition {
        gamma: set.gamma,
        terms: set.terms[idx].clone(),
    })
}

/// Clipping threshold for a tensor under `policy`.
pub fn compute_clip_threshold(values: &Tensor, policy: ClipPolicy) -> Result<f32> {
    let mags: Vec<f32> = values.data().iter().map(|v| v.abs()).collect();
    if mags.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_clip_threshold"));
    }
    let alpha = match policy {
        ClipPolicy::MaxAbs => mags.iter().copied().fold(0.0, f32::max),
        ClipPolicy::Percentile(q) => {
            if !(q > 0.0 && q <= 100.0) {
                return Err(Error::Config(format!("percentile {q} outside (0, 100]")));
            }
            percentile_select(mags, q)
        }
    };
    Ok(if alpha > 0.0 { alpha } else { DEGENERATE_ALPHA })
}

/// Linear interpolation between the order statistics around rank `q/100·(N−1)`.
fn percentile_select(mut mags: Vec<f32>, q: f64) -> f32 {
    let rank = q / 100.0 * (mags.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_val, upper) = mags.select_nth_unstable_by(lo, f32::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f32::INFINITY, f32::min);
    (lo_val as f64 + frac * (hi_val as f64 - lo_val as f64)) as f32
}

/// What is being quantized decides where α comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantTarget {
    /// α from the configured clip policy over the tensor itself.
    Weights,
    /// α supplied by the caller (activation range tracking).
    Activations { alpha: f32 },
}

/// Forward value of a straight-through quantizer plus its gradient gate.
#[derive(Debug, Clone)]
pub struct SteQuantized {
    pub output: Tensor,
    /// `true` where the incoming gradient passes unchanged.
    pub pass: Vec<bool>,
    /// `None` for passthrough configurations.
    pub level_set: Option<LevelSet>,
}

impl SteQuantized {
    pub fn backward(&self, upstream: &Tensor) -> Result<Tensor> {
        if upstream.shape() != self.output.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match quantized tensor {:?}",
                upstream.shape(),
                self.output.shape()
            )));
        }
        let g = upstream
            .data()
            .iter()
            .zip(&self.pass)
            .map(|(&g, &p)| if p { g } else { 0.0 })
            .collect();
        Tensor::new(upstream.shape(), g)
    }
}

/// Elementwise nearest-level projection with a clipped straight-through gradient.
pub fn quantize_tensor_ste(
    t: &Tensor,
    config: &QuantConfig,
    target: QuantTarget,
) -> Result<SteQuantized> {
    config.validate()?;
    if matches!(target, QuantTarget::Activations { .. }) && config.signed {
        return Err(Error::Config(
            "activations follow a ReLU and must use an unsigned quantizer".into(),
        ));
    }
    if config.is_passthrough() {
        return Ok(SteQuantized {
            output: t.clone(),
            pass: vec![true; t.numel()],
            level_set: None,
        });
    }
    let alpha = match target {
        QuantTarget::Weights => compute_clip_threshold(t, config.clip)?,
        QuantTarget::Activations { alpha } => alpha,
    };
    let set = build_level_set(config, alpha)?;
    let output = t.map(|v| quantize_nearest(v, &set));
    let pass = t.data().iter().map(|&v| set.in_range(v)).collect();
    Ok(SteQuantized {
        output,
        pass,
        level_set: Some(set),
    })
}

/// CSV listing of a level set: `index,level,terms`.
pub fn levels_csv(set: &LevelSet) -> String {
    let mut out = String::from("index,level,terms\n");
    for (i, (&l, t)) in set.levels.iter().zip(&set.terms).enumerate() {
        let terms: Vec<String> = t
            .iter()
            .map(|p| format!("{}2^-{}", if p.negative { '-' } else { '+' }, p.exponent))
            .collect();
        out.push_str(&format!("{i},{l},{}\n", terms.join(" ")));
    }
    out
}
