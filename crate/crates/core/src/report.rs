//! Run reports: a versioned JSON summary and the per-epoch CSV.

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::metrics::{compression_report, CompressionPolicy};
use crate::nn::Network;
use crate::pipelines::{EpochRecord, Pipeline, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCensus {
    pub layer: String,
    pub filters: usize,
    pub pruned: usize,
}

/// Model size and BOPs of the run's architecture under its compression policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub policy: CompressionPolicy,
    pub size_bits_baseline: u64,
    pub size_bits_compressed: u64,
    pub bops_baseline: u64,
    pub bops_compressed: u64,
    pub size_ratio: f64,
    pub bops_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub pipeline: Pipeline,
    pub model: String,
    pub config: TrainConfig,
    pub final_train_acc: Option<f64>,
    pub final_eval_acc: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub mask_census: Vec<LayerCensus>,
    pub normalization: Option<Normalization>,
    pub metrics: Option<MetricsSummary>,
}

/// Compression policy matching what `pipeline` does to the model.
pub fn policy_for(pipeline: Pipeline, cfg: &TrainConfig) -> CompressionPolicy {
    match pipeline {
        Pipeline::Baseline => CompressionPolicy::baseline(),
        Pipeline::Spq | Pipeline::Ppq => CompressionPolicy {
            weight_bits: cfg.quant.weights.bits,
            act_bits: cfg.quant.acts.bits,
            first_last_bits: cfg.first_last_bits,
            conv_prune_rate: cfg.max_rate(),
            overrides: Default::default(),
        },
    }
}

impl RunReport {
    /// A report with no epochs and no model statistics.
    pub fn empty(pipeline: Pipeline, cfg: &TrainConfig) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            pipeline,
            model: cfg.model.clone(),
            config: cfg.clone(),
            final_train_acc: None,
            final_eval_acc: None,
            epochs: Vec::new(),
            mask_census: Vec::new(),
            normalization: None,
            metrics: None,
        }
    }

    pub fn build(
        pipeline: Pipeline,
        cfg: &TrainConfig,
        net: &Network,
        records: &[EpochRecord],
        normalization: Normalization,
        image_size: usize,
    ) -> Result<Self> {
        let arch = net.descriptor(image_size)?;
        let policy = policy_for(pipeline, cfg);
        let r = compression_report(&arch, &CompressionPolicy::baseline(), &policy)?;
        Ok(RunReport {
            final_train_acc: records.last().map(|r| r.train_acc),
            final_eval_acc: records.last().map(|r| r.eval_acc),
            epochs: records.to_vec(),
            mask_census: net
                .convs()
                .iter()
                .map(|c| LayerCensus {
                    layer: c.name.clone(),
                    filters: c.out_channels(),
                    pruned: c.mask.as_ref().map_or(0, |m| m.pruned_count),
                })
                .collect(),
            normalization: Some(normalization),
            metrics: Some(MetricsSummary {
                policy,
                size_bits_baseline: r.size_bits_baseline,
                size_bits_compressed: r.size_bits_compressed,
                bops_baseline: r.bops_baseline,
                bops_compressed: r.bops_compressed,
                size_ratio: r.size_ratio,
                bops_ratio: r.bops_ratio,
            }),
            ..RunReport::empty(pipeline, cfg)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks the schema version.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

pub const EPOCH_CSV_HEADER: &str = "epoch,phase,train_acc,eval_acc,lr,pruned_fraction";

pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.phase.name(),
            r.train_acc,
            r.eval_acc,
            r.lr,
            r.pruned_fraction
        ));
    }
    s
}
