//! Geometric-median filter pruning.
//!
//! A filter's score is its summed Euclidean distance to every filter of the
//! same layer. The filter minimizing that sum is the sample point nearest the
//! layer's geometric median, so the lowest-scoring filters are the most
//! replaceable ones and get zero-masked first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::QConv2d;
use crate::tensor::{expect_rank, Tensor};

/// One output filter of a conv weight, flattened input-channel-major, then row, then column.
#[derive(Debug, Clone, Copy)]
pub struct FilterView<'a> {
    pub layer_id: &'a str,
    pub index: usize,
    pub values: &'a [f32],
}

pub fn filter_views<'a>(layer_id: &'a str, weights: &'a Tensor) -> Result<Vec<FilterView<'a>>> {
    expect_rank(weights, 4, "conv weight")?;
    let len: usize = weights.shape()[1..].iter().product();
    Ok(weights
        .data()
        .chunks(len)
        .enumerate()
        .map(|(index, values)| FilterView {
            layer_id,
            index,
            values,
        })
        .collect())
}

/// `scores[j] = Σ_j' ‖F_j − F_j'‖₂` over all filters of the layer.
pub fn filter_distance_sums(weights: &Tensor) -> Result<Vec<f64>> {
    let views = filter_views("", weights)?;
    if views.len() < 2 {
        return Err(Error::Degenerate {
            layer: String::new(),
            msg: format!("{} filter(s); at least 2 are needed to score", views.len()),
        });
    }
    let n = views.len();
    let mut scores = vec![0.0f64; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = views[a]
                .values
                .iter()
                .zip(views[b].values)
                .map(|(&x, &y)| {
                    let diff = x as f64 - y as f64;
                    diff * diff
                })
                .sum::<f64>()
                .sqrt();
            scores[a] += d;
            scores[b] += d;
        }
    }
    Ok(scores)
}

/// Filters removed at `rate`: `floor(rate · filters)`.
pub fn pruned_count(rate: f64, filters: usize) -> usize {
    // The epsilon keeps exact products such as 0.3·10 from flooring down.
    (rate * filters as f64 + 1e-9).floor() as usize
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("prune rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Per-layer filter mask. `keep[j] == false` means filter `j` is zeroed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_id: String,
    pub keep: Vec<bool>,
    pub pruned_count: usize,
}

impl PruneMask {
    pub fn keep_all(layer_id: &str, filters: usize) -> Self {
        PruneMask {
            layer_id: layer_id.to_string(),
            keep: vec![true; filters],
            pruned_count: 0,
        }
    }

    pub fn from_pruned(layer_id: &str, filters: usize, pruned: &[usize]) -> Self {
        let mut keep = vec![true; filters];
        pruned.iter().for_each(|&j| keep[j] = false);
        let pruned_count = keep.iter().filter(|k| !**k).count();
        PruneMask {
            layer_id: layer_id.to_string(),
            keep,
            pruned_count,
        }
    }

    pub fn filters(&self) -> usize {
        self.keep.len()
    }

    pub fn pruned(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, k)| !**k)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn is_pruned(&self, filter: usize) -> bool {
        !self.keep[filter]
    }

    /// Whether every filter pruned here is also pruned in `other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.keep.len() == other.keep.len()
            && self.keep.iter().zip(&other.keep).all(|(&a, &b)| a || !b)
    }
}

/// Indices ordered by ascending score, lower index first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Masks the `floor(rate · O)` lowest-scoring filters.
pub fn select_prune_set(layer_id: &str, scores: &[f64], rate: f64) -> Result<PruneMask> {
    check_rate(rate)?;
    let k = pruned_count(rate, scores.len());
    let chosen: Vec<usize> = ranked(scores).into_iter().take(k).collect();
    Ok(PruneMask::from_pruned(layer_id, scores.len(), &chosen))
}

/// Like [`select_prune_set`] but keeps everything `prior` already pruned and
/// fills the remaining budget from the unpruned filters.
pub fn select_prune_set_extending(
    layer_id: &str,
    scores: &[f64],
    rate: f64,
    prior: &PruneMask,
) -> Result<PruneMask> {
    check_rate(rate)?;
    if prior.filters() != scores.len() {
        return Err(Error::Shape(format!(
            "prior mask covers {} filters, layer has {}",
            prior.filters(),
            scores.len()
        )));
    }
    let target = pruned_count(rate, scores.len()).max(prior.pruned_count);
    let mut chosen = prior.pruned();
    chosen.extend(
        ranked(scores)
            .into_iter()
            .filter(|&j| !prior.is_pruned(j))
            .take(target - prior.pruned_count),
    );
    Ok(PruneMask::from_pruned(layer_id, scores.len(), &chosen))
}

/// Sets the weights of every masked filter to zero.
pub fn zero_filters(weights: &mut Tensor, mask: &PruneMask) -> Result<()> {
    expect_rank(weights, 4, "conv weight")?;
    if weights.shape()[0] != mask.filters() {
        return Err(Error::Shape(format!(
            "mask for {} filters applied to weight {:?}",
            mask.filters(),
            weights.shape()
        )));
    }
    let len: usize = weights.shape()[1..].iter().product();
    for j in mask.pruned() {
        weights.data_mut()[j * len..(j + 1) * len]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    Ok(())
}

/// Zeroes the masked filters of `layer` and installs the mask on its forward
/// pass. With `zero_grad`, later backward passes write zero gradients into
/// those filters so they stay at zero.
pub fn apply_mask(layer: &mut QConv2d, mask: PruneMask, zero_grad: bool) -> Result<()> {
    zero_filters(&mut layer.weight, &mask)?;
    layer.freeze_masked = zero_grad;
    layer.mask = if mask.pruned_count == 0 {
        None
    } else {
        Some(mask)
    };
    Ok(())
}

/// Scores `layer` on its full-precision weights and masks the closest `rate` fraction.
pub fn gm_mask(layer: &QConv2d, rate: f64, prior: Option<&PruneMask>) -> Result<PruneMask> {
    let scores = filter_distance_sums(&layer.weight).map_err(|e| match e {
        Error::Degenerate { msg, .. } => Error::Degenerate {
            layer: layer.name.clone(),
            msg,
        },
        other => other,
    })?;
    match prior {
        Some(p) => select_prune_set_extending(&layer.name, &scores, rate, p),
        None => select_prune_set(&layer.name, &scores, rate),
    }
}
