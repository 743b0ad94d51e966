//! Baseline training, simultaneous prune-and-quantize (SPQ) and
//! prune-then-quantize (PPQ).
//!
//! SPQ trains with quantized forward passes from the first epoch. At every
//! epoch end it rescans the full-precision weights, re-selects the filters
//! nearest the geometric median and zeroes them. Masked filters still receive
//! gradients, so a filter pruned at one epoch can come back at the next.
//!
//! PPQ first trains in full precision and prunes in `s` stages, every
//! `floor(n/s)` epochs, with masks that only grow and whose filters get zero
//! gradient and zero momentum. It then runs quantization-aware training of
//! the pruned model for `m` epochs at a fresh learning rate.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{gen_synthetic, load_cifar10, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{ModelKind, Network};
use crate::ops::softmax_cross_entropy;
use crate::optim::{Sgd, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::prune::{apply_mask, gm_mask, PruneMask};
use crate::quant::QuantConfig;
use crate::tensor::Tensor;

/// Stream offset separating the shuffle RNG from the model-init RNG.
const SHUFFLE_STREAM: u64 = 0x5eed_0001;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    #[serde(default = "default_base_bits")]
    pub base_bits: u32,
}

fn default_base_bits() -> u32 {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPair {
    pub weights: QuantSpec,
    pub acts: QuantSpec,
}

impl QuantPair {
    pub fn weight_config(&self) -> QuantConfig {
        QuantConfig::signed(self.weights.bits, self.weights.base_bits)
    }

    pub fn act_config(&self) -> QuantConfig {
        QuantConfig::unsigned(self.acts.bits, self.acts.base_bits)
    }
}

impl Default for QuantPair {
    fn default() -> Self {
        QuantPair {
            weights: QuantSpec {
                bits: 4,
                base_bits: 2,
            },
            acts: QuantSpec {
                bits: 4,
                base_bits: 2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Keep only the first `limit` CIFAR-10 training records.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_n_per_class() -> usize {
    100
}
fn default_classes() -> usize {
    10
}
fn default_image_size() -> usize {
    16
}
fn default_noise() -> f32 {
    1.0
}
fn default_val_fraction() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            seed: 0,
            n_per_class: default_n_per_class(),
            classes: default_classes(),
            image_size: default_image_size(),
            noise: default_noise(),
            val_fraction: default_val_fraction(),
            limit: None,
        }
    }
}

impl DataConfig {
    /// `(train, val)`: the training pool minus a seeded validation split.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let pool = match self.source {
            DataSource::Synthetic => gen_synthetic(&SyntheticSpec {
                seed: self.seed,
                n_per_class: self.n_per_class,
                classes: self.classes,
                image_size: self.image_size,
                noise: self.noise,
            })?,
            DataSource::Cifar10 => {
                let dir = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for cifar10".into()))?;
                load_cifar10(dir, Split::Train, self.limit)?
            }
        };
        pool.split_train_val(self.val_fraction, self.seed ^ SHUFFLE_STREAM)
    }
}

fn default_model() -> String {
    "desknet-r8".into()
}
fn default_lr0() -> f64 {
    0.1
}
fn default_lr_quant() -> f64 {
    0.01
}
fn default_lr_decay() -> f64 {
    0.9
}
fn default_window() -> usize {
    3
}
fn default_momentum() -> f32 {
    DEFAULT_MOMENTUM
}
fn default_weight_decay() -> f32 {
    DEFAULT_WEIGHT_DECAY
}
fn default_batch() -> usize {
    128
}
fn default_first_last() -> u32 {
    8
}
fn default_stages() -> usize {
    2
}
fn default_rates() -> Vec<f64> {
    vec![0.15, 0.3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub seed: u64,
    /// `n`: baseline epochs, SPQ epochs, and PPQ pruning-phase epochs.
    pub epochs_prune: usize,
    /// `m`: PPQ quantization-phase epochs.
    #[serde(default)]
    pub epochs_quant: usize,
    /// `s`: PPQ pruning stages.
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Cumulative prune rate reached at each stage; SPQ uses the last one.
    #[serde(default = "default_rates")]
    pub prune_rates: Vec<f64>,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_lr_quant")]
    pub lr_quant: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_window")]
    pub plateau_window: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub quant: QuantPair,
    #[serde(default = "default_first_last")]
    pub first_last_bits: u32,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: default_model(),
            seed: 0,
            epochs_prune: 30,
            epochs_quant: 10,
            stages: default_stages(),
            prune_rates: default_rates(),
            lr0: default_lr0(),
            lr_quant: default_lr_quant(),
            lr_decay: default_lr_decay(),
            plateau_window: default_window(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            quant: QuantPair::default(),
            first_last_bits: default_first_last(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        ModelKind::from_name(&self.model)
    }

    /// Final prune rate `p_max`.
    pub fn max_rate(&self) -> f64 {
        self.prune_rates.last().copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kind()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr_quant > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay {} outside (0, 1]",
                self.lr_decay
            )));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be positive".into()));
        }
        if let Some(&bad) = self.prune_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("prune rate {bad} outside [0, 1)")));
        }
        if self.prune_rates.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "prune_rates {:?} decrease",
                self.prune_rates
            )));
        }
        self.quant.weight_config().validate()?;
        self.quant.act_config().validate()?;
        self.quant
            .weight_config()
            .with_bits(self.first_last_bits)
            .validate()?;
        Ok(())
    }

    fn validate_ppq(&self) -> Result<()> {
        self.validate()?;
        if self.stages == 0 || self.prune_rates.len() != self.stages {
            return Err(Error::Config(format!(
                "{} stages need exactly that many prune rates, got {:?}",
                self.stages, self.prune_rates
            )));
        }
        if self.epochs_prune < self.stages {
            return Err(Error::Config(format!(
                "{} pruning epochs cannot hold {} stages",
                self.epochs_prune, self.stages
            )));
        }
        Ok(())
    }

    /// Epochs between PPQ stage boundaries, `floor(n / s)`.
    pub fn stage_period(&self) -> usize {
        self.epochs_prune / self.stages.max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Baseline,
    Spq,
    PpqPrune,
    PpqQat,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Spq => "spq",
            Phase::PpqPrune => "ppq-prune",
            Phase::PpqQat => "ppq-qat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub pruned_fraction: f64,
    pub stage: usize,
}

/// `lr0 · decay^j`, where `j` counts the window ends at which accuracy did
/// not beat the best value before the window. For the first window the
/// reference is the first epoch's accuracy.
pub fn lr_for_history(lr0: f64, decay: f64, window: usize, history: &[f64]) -> f64 {
    lr0 * decay.powi(plateau_decays(window, history) as i32)
}

fn plateau_decays(window: usize, history: &[f64]) -> usize {
    let window = window.max(1);
    let max = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (1..=history.len() / window)
        .filter(|&w| {
            let end = w * window;
            let reference = if w == 1 {
                history[0]
            } else {
                max(&history[..end - window])
            };
            max(&history[end - window..end]) <= reference
        })
        .count()
}

/// Plateau learning-rate schedule over an accuracy history.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub window: usize,
    history: Vec<f64>,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, decay: f64, window: usize) -> Self {
        PlateauSchedule {
            lr0,
            decay,
            window,
            history: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        lr_for_history(self.lr0, self.decay, self.window, &self.history)
    }

    /// Appends one epoch's accuracy and returns the rate for the next epoch.
    pub fn record(&mut self, accuracy: f64) -> f64 {
        self.history.push(accuracy);
        self.lr()
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }
}

/// Hooks into a running pipeline. Every method defaults to a no-op.
pub trait Observer {
    fn after_step(&mut self, _phase: Phase, _net: &Network) {}
    /// Called right before masks are (re)selected.
    fn before_prune(&mut self, _epoch: usize, _net: &Network) {}
    fn after_epoch(&mut self, _record: &EpochRecord, _net: &Network) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Records plus the final model.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Top-1 accuracy. With `quantized == false` any installed quantizers are
/// bypassed; masks always apply.
pub fn evaluate(net: &mut Network, data: &Dataset, quantized: bool) -> Result<f64> {
    if !quantized && net.is_quantized() {
        let saved: Vec<_> = net.convs().iter().map(|c| c.quant).collect();
        let saved_fc = net.fc.quant;
        net.clear_quant();
        let acc = evaluate(net, data, false);
        for (c, q) in net.convs_mut().into_iter().zip(saved) {
            c.quant = q;
        }
        net.fc.quant = saved_fc;
        return acc;
    }
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.forward(&x, false)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of all conv filters currently masked.
pub fn pruned_fraction(net: &Network) -> f64 {
    let (pruned, total) = net.convs().iter().fold((0, 0), |(p, t), c| {
        (
            p + c.mask.as_ref().map_or(0, |m| m.pruned_count),
            t + c.out_channels(),
        )
    });
    pruned as f64 / total as f64
}

struct Trainer<'a> {
    train: &'a Dataset,
    val: &'a Dataset,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
    records: Vec<EpochRecord>,
}

impl<'a> Trainer<'a> {
    fn new(train: &'a Dataset, val: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(
                "training and validation sets must be nonempty".into(),
            ));
        }
        Ok(Trainer {
            train,
            val,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM),
            records: Vec::new(),
        })
    }

    fn optimizer(&self, net: &mut Network, lr: f64) -> Sgd {
        Sgd::new(
            &net.param_sizes(),
            lr as f32,
            self.cfg.momentum,
            self.cfg.weight_decay,
        )
    }

    /// One pass over the shuffled training set; returns running train accuracy.
    fn epoch(
        &mut self,
        net: &mut Network,
        opt: &mut Sgd,
        phase: Phase,
        obs: &mut dyn Observer,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut correct = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = self.train.batch(chunk)?;
            net.zero_grad();
            let logits = net.forward(&x, true)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            correct += count_correct(&logits, &y);
            net.backward(&grad)?;
            opt.step(net.params_mut())?;
            obs.after_step(phase, net);
        }
        Ok(correct as f64 / self.train.len() as f64)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_epoch(
        &mut self,
        net: &mut Network,
        phase: Phase,
        train_acc: f64,
        lr: f64,
        stage: usize,
        sched: &mut PlateauSchedule,
        opt: &mut Sgd,
        obs: &mut dyn Observer,
    ) -> Result<()> {
        let eval_acc = evaluate(net, self.val, true)?;
        let record = EpochRecord {
            epoch: self.records.len(),
            phase,
            train_acc,
            eval_acc,
            lr,
            pruned_fraction: pruned_fraction(net),
            stage,
        };
        info!(
            "{} epoch {}: train {:.4} eval {:.4} lr {:.5} pruned {:.3}",
            phase.name(),
            record.epoch,
            train_acc,
            eval_acc,
            lr,
            record.pruned_fraction
        );
        obs.after_epoch(&record, net);
        self.records.push(record);
        opt.set_lr(sched.record(eval_acc) as f32);
        Ok(())
    }
}

/// Full-precision training for `epochs_prune` epochs.
pub fn train_baseline(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut t = Trainer::new(train, val, cfg)?;
    let mut opt = t.optimizer(net, cfg.lr0);
    let mut sched = PlateauSchedule::new(cfg.lr0, cfg.lr_decay, cfg.plateau_window);
    for _ in 0..cfg.epochs_prune {
        let lr = sched.lr();
        let acc = t.epoch(net, &mut opt, Phase::Baseline, obs)?;
        t.finish_epoch(net, Phase::Baseline, acc, lr, 0, &mut sched, &mut opt, obs)?;
    }
    Ok(RunOutcome {
        records: t.records,
        checkpoint: Checkpoint::from_network(net),
    })
}

/// Quantized training with GM masks re-selected at every epoch end.
pub fn run_spq(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let rate = cfg.max_rate();
    net.set_quant(
        cfg.quant.weight_config(),
        cfg.quant.act_config(),
        cfg.first_last_bits,
    )?;
    let mut t = Trainer::new(train, val, cfg)?;
    let mut opt = t.optimizer(net, cfg.lr0);
    let mut sched = PlateauSchedule::new(cfg.lr0, cfg.lr_decay, cfg.plateau_window);
    for epoch in 0..cfg.epochs_prune {
        let lr = sched.lr();
        net.reset_act_ranges();
        let acc = t.epoch(net, &mut opt, Phase::Spq, obs)?;
        net.freeze_act_ranges();
        obs.before_prune(epoch, net);
        for conv in net.convs_mut() {
            let mask = gm_mask(conv, rate, None)?;
            apply_mask(conv, mask, false)?;
        }
        t.finish_epoch(net, Phase::Spq, acc, lr, 0, &mut sched, &mut opt, obs)?;
    }
    Ok(RunOutcome {
        records: t.records,
        checkpoint: Checkpoint::from_network(net),
    })
}

/// Staged permanent pruning in full precision, then quantization-aware training.
pub fn run_ppq(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutcome> {
    cfg.validate_ppq()?;
    let period = cfg.stage_period();
    let mut t = Trainer::new(train, val, cfg)?;
    let mut opt = t.optimizer(net, cfg.lr0);
    let mut sched = PlateauSchedule::new(cfg.lr0, cfg.lr_decay, cfg.plateau_window);
    let mut stage = 0;
    for epoch in 0..cfg.epochs_prune {
        let lr = sched.lr();
        let acc = t.epoch(net, &mut opt, Phase::PpqPrune, obs)?;
        if (epoch + 1) % period == 0 && stage < cfg.stages {
            let rate = cfg.prune_rates[stage];
            stage += 1;
            obs.before_prune(epoch, net);
            for (i, conv) in net.convs_mut().into_iter().enumerate() {
                let prior = conv
                    .mask
                    .clone()
                    .unwrap_or_else(|| PruneMask::keep_all(&conv.name, conv.out_channels()));
                let mask = gm_mask(conv, rate, Some(&prior))?;
                opt.clear_filters(i, conv.filter_len(), &mask.pruned());
                apply_mask(conv, mask, true)?;
            }
        }
        t.finish_epoch(
            net,
            Phase::PpqPrune,
            acc,
            lr,
            stage,
            &mut sched,
            &mut opt,
            obs,
        )?;
    }

    net.set_quant(
        cfg.quant.weight_config(),
        cfg.quant.act_config(),
        cfg.first_last_bits,
    )?;
    let mut opt = t.optimizer(net, cfg.lr_quant);
    let mut sched = PlateauSchedule::new(cfg.lr_quant, cfg.lr_decay, cfg.plateau_window);
    for _ in 0..cfg.epochs_quant {
        let lr = sched.lr();
        net.reset_act_ranges();
        let acc = t.epoch(net, &mut opt, Phase::PpqQat, obs)?;
        net.freeze_act_ranges();
        t.finish_epoch(
            net,
            Phase::PpqQat,
            acc,
            lr,
            stage,
            &mut sched,
            &mut opt,
            obs,
        )?;
    }
    Ok(RunOutcome {
        records: t.records,
        checkpoint: Checkpoint::from_network(net),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Baseline,
    Spq,
    Ppq,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Spq => "spq",
            Pipeline::Ppq => "ppq",
        }
    }
}

/// Fresh model from `cfg.seed`.
pub fn init_network(cfg: &TrainConfig, classes: usize) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Network::new(cfg.model_kind()?, classes, &mut rng))
}

/// Loads the configured data, builds the model and runs `pipeline`.
pub fn run_pipeline(
    pipeline: Pipeline,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<(Network, Dataset, RunOutcome)> {
    let (train, val) = cfg.data.load()?;
    let mut net = init_network(cfg, train.classes)?;
    let outcome = match pipeline {
        Pipeline::Baseline => train_baseline(&mut net, &train, &val, cfg, obs)?,
        Pipeline::Spq => run_spq(&mut net, &train, &val, cfg, obs)?,
        Pipeline::Ppq => run_ppq(&mut net, &train, &val, cfg, obs)?,
    };
    Ok((net, train, outcome))
}
