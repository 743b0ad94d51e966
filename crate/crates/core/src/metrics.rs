//! Static model-size and BOPs accounting.
//!
//! * size = Σ_i |W_i| · weight_bits(i)
//! * BOPs = Σ_i MACs(i) · weight_bits(i) · act_in_bits(i)
//!
//! Compressed accounting treats pruned filters as removed: a layer keeps
//! `C − floor(p·C)` output channels, and its consumers keep the same number
//! of input channels. Training uses zero masks instead, but the stored and
//! executed model is the one with those channels dropped.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::pruned_count;

/// Bits per megabyte as used in the size tables (10^6 bytes).
pub const BITS_PER_MB: f64 = 8.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Fc,
}

fn default_bits() -> u32 {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    #[serde(default)]
    pub has_bias: bool,
    /// Layer whose output feeds this one (the main path for residual sums).
    #[serde(default)]
    pub producer: Option<String>,
    #[serde(default = "default_bits")]
    pub weight_bits: u32,
    #[serde(default = "default_bits")]
    pub act_in_bits: u32,
    #[serde(default)]
    pub prune_rate_out: f64,
    #[serde(default)]
    pub prune_rate_in: f64,
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        out_hw: usize,
        producer: Option<String>,
    ) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            kernel_h: kernel,
            kernel_w: kernel,
            out_h: out_hw,
            out_w: out_hw,
            has_bias: false,
            producer,
            weight_bits: 32,
            act_in_bits: 32,
            prune_rate_out: 0.0,
            prune_rate_in: 0.0,
        }
    }

    pub fn fc(
        name: &str,
        in_features: usize,
        out_features: usize,
        producer: Option<String>,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Fc,
            has_bias: true,
            ..LayerSpec::conv(name, in_features, out_features, 1, 1, producer)
        }
    }

    pub fn param_count(&self) -> u64 {
        let w = (self.out_ch * self.in_ch * self.kernel_h * self.kernel_w) as u64;
        w + if self.has_bias { self.out_ch as u64 } else { 0 }
    }

    pub fn macs(&self) -> u64 {
        (self.out_h * self.out_w * self.out_ch * self.in_ch * self.kernel_h * self.kernel_w) as u64
    }

    pub fn kept_out(&self) -> usize {
        self.out_ch - pruned_count(self.prune_rate_out, self.out_ch)
    }

    pub fn kept_in(&self) -> usize {
        self.in_ch - pruned_count(self.prune_rate_in, self.in_ch)
    }

    pub fn effective_params(&self) -> u64 {
        let w = (self.kept_out() * self.kept_in() * self.kernel_h * self.kernel_w) as u64;
        w + if self.has_bias {
            self.kept_out() as u64
        } else {
            0
        }
    }

    pub fn effective_macs(&self) -> u64 {
        (self.out_h * self.out_w * self.kept_out() * self.kept_in() * self.kernel_h * self.kernel_w)
            as u64
    }

    pub fn size_bits(&self) -> u64 {
        self.effective_params() * self.weight_bits as u64
    }

    pub fn bops(&self) -> u64 {
        self.effective_macs() * self.weight_bits as u64 * self.act_in_bits as u64
    }
}

/// Layers whose outputs are summed by a residual connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualLink {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub residual_links: Vec<ResidualLink>,
}

impl ArchDescriptor {
    pub fn from_toml(text: &str) -> Result<Self> {
        let d: ArchDescriptor = toml::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Checks names, producer plumbing and residual channel agreement.
    pub fn validate(&self) -> Result<()> {
        let mut index = HashMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.name.as_str(), i).is_some() {
                return Err(Error::Descriptor(format!(
                    "duplicate layer name '{}'",
                    l.name
                )));
            }
            if l.in_ch == 0
                || l.out_ch == 0
                || l.kernel_h == 0
                || l.kernel_w == 0
                || l.out_h == 0
                || l.out_w == 0
            {
                return Err(Error::Descriptor(format!(
                    "layer '{}' has a zero extent",
                    l.name
                )));
            }
            if let Some(p) = &l.producer {
                let &j = index.get(p.as_str()).ok_or_else(|| {
                    Error::Descriptor(format!(
                        "layer '{}' consumes unknown or later layer '{p}'",
                        l.name
                    ))
                })?;
                if j == i {
                    return Err(Error::Descriptor(format!(
                        "layer '{}' consumes itself",
                        l.name
                    )));
                }
                let prod = &self.layers[j];
                if prod.out_ch != l.in_ch {
                    return Err(Error::Descriptor(format!(
                        "layer '{}' expects {} input channels but '{}' produces {}",
                        l.name, l.in_ch, prod.name, prod.out_ch
                    )));
                }
            }
        }
        for link in &self.residual_links {
            let a = self
                .layer(&link.a)
                .ok_or_else(|| Error::Descriptor(format!("unknown layer '{}'", link.a)))?;
            let b = self
                .layer(&link.b)
                .ok_or_else(|| Error::Descriptor(format!("unknown layer '{}'", link.b)))?;
            if a.out_ch != b.out_ch {
                return Err(Error::Descriptor(format!(
                    "residual sum of '{}' ({} ch) and '{}' ({} ch)",
                    a.name, a.out_ch, b.name, b.out_ch
                )));
            }
            if a.kept_out() != b.kept_out() {
                return Err(Error::Descriptor(format!(
                    "residual sum of '{}' and '{}' would keep {} vs {} channels",
                    a.name,
                    b.name,
                    a.kept_out(),
                    b.kept_out()
                )));
            }
        }
        Ok(())
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(LayerSpec::macs).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub weight_bits: Option<u32>,
    pub act_in_bits: Option<u32>,
    pub prune_rate_out: Option<f64>,
}

/// Bit-widths and prune rates assigned to every layer of a descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPolicy {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Bits for the first layer's weights and input and the last layer's weights and input.
    pub first_last_bits: u32,
    /// Output-filter prune rate applied to every conv layer. FC layers are never pruned.
    #[serde(default)]
    pub conv_prune_rate: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, LayerOverride>,
}

impl CompressionPolicy {
    /// Full precision, nothing pruned.
    pub fn baseline() -> Self {
        CompressionPolicy {
            weight_bits: 32,
            act_bits: 32,
            first_last_bits: 32,
            conv_prune_rate: 0.0,
            overrides: BTreeMap::new(),
        }
    }

    /// 30% conv filter pruning, 4-bit weights and activations, first and last layers at 8 bits.
    pub fn compressed() -> Self {
        CompressionPolicy {
            weight_bits: 4,
            act_bits: 4,
            first_last_bits: 8,
            conv_prune_rate: 0.3,
            overrides: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: CompressionPolicy = toml::from_str(text)?;
        Ok(p)
    }

    fn check_rate(rate: f64, what: &str) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "{what} prune rate {rate} outside [0, 1)"
            )));
        }
        Ok(())
    }

    /// Returns `arch` with bits and prune rates filled in.
    pub fn apply(&self, arch: &ArchDescriptor) -> Result<ArchDescriptor> {
        Self::check_rate(self.conv_prune_rate, "conv")?;
        for name in self.overrides.keys() {
            if arch.layer(name).is_none() {
                return Err(Error::Config(format!(
                    "policy override for unknown layer '{name}'"
                )));
            }
        }
        let last = arch.layers.len().saturating_sub(1);
        let mut out = arch.clone();
        for (i, l) in out.layers.iter_mut().enumerate() {
            let edge = i == 0 || i == last;
            l.weight_bits = if edge {
                self.first_last_bits
            } else {
                self.weight_bits
            };
            l.act_in_bits = if edge {
                self.first_last_bits
            } else {
                self.act_bits
            };
            l.prune_rate_out = if l.kind == LayerKind::Conv {
                self.conv_prune_rate
            } else {
                0.0
            };
            if let Some(o) = self.overrides.get(&l.name) {
                l.weight_bits = o.weight_bits.unwrap_or(l.weight_bits);
                l.act_in_bits = o.act_in_bits.unwrap_or(l.act_in_bits);
                if let Some(r) = o.prune_rate_out {
                    Self::check_rate(r, &l.name)?;
                    l.prune_rate_out = r;
                }
            }
        }
        let rates: HashMap<String, f64> = out
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.prune_rate_out))
            .collect();
        for l in out.layers.iter_mut() {
            l.prune_rate_in = l.producer.as_ref().map_or(0.0, |p| rates[p]);
        }
        out.validate()?;
        Ok(out)
    }
}

/// Σ |W_i| · weight_bits(i) with pruned channels removed.
pub fn model_size(arch: &ArchDescriptor, policy: &CompressionPolicy) -> Result<u64> {
    Ok(policy
        .apply(arch)?
        .layers
        .iter()
        .map(LayerSpec::size_bits)
        .sum())
}

/// Σ MACs(i) · weight_bits(i) · act_in_bits(i) with pruned channels removed.
pub fn bops(arch: &ArchDescriptor, policy: &CompressionPolicy) -> Result<u64> {
    Ok(policy.apply(arch)?.layers.iter().map(LayerSpec::bops).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub weight_bits: u32,
    pub act_in_bits: u32,
    pub kept_out: usize,
    pub kept_in: usize,
    /// Fraction of the layer's weights that survive pruning.
    pub survival: f64,
    pub size_bits: u64,
    pub bops: u64,
}

impl LayerBreakdown {
    fn of(l: &LayerSpec) -> Self {
        LayerBreakdown {
            name: l.name.clone(),
            kind: l.kind,
            params: l.effective_params(),
            macs: l.effective_macs(),
            weight_bits: l.weight_bits,
            act_in_bits: l.act_in_bits,
            kept_out: l.kept_out(),
            kept_in: l.kept_in(),
            survival: l.effective_params() as f64 / l.param_count() as f64,
            size_bits: l.size_bits(),
            bops: l.bops(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerComparison {
    pub baseline: LayerBreakdown,
    pub compressed: LayerBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub arch: String,
    pub size_bits_baseline: u64,
    pub size_bits_compressed: u64,
    pub bops_baseline: u64,
    pub bops_compressed: u64,
    pub size_ratio: f64,
    pub bops_ratio: f64,
    pub accounting: String,
    pub layers: Vec<LayerComparison>,
}

pub const ACCOUNTING_NOTE: &str = "pruned filters counted as removed: each conv keeps C - floor(p*C) output \
channels and its consumers keep the same number of input channels; residual sums keep matching channel \
counts; FC layers are not pruned but drop the input features of a pruned producer";

/// Baseline-to-compressed ratios for size and BOPs plus a per-layer breakdown.
pub fn compression_report(
    arch: &ArchDescriptor,
    baseline: &CompressionPolicy,
    compressed: &CompressionPolicy,
) -> Result<CompressionReport> {
    let base = baseline.apply(arch)?;
    let comp = compressed.apply(arch)?;
    let layers: Vec<LayerComparison> = base
        .layers
        .iter()
        .zip(&comp.layers)
        .map(|(b, c)| LayerComparison {
            baseline: LayerBreakdown::of(b),
            compressed: LayerBreakdown::of(c),
        })
        .collect();
    let sb: u64 = layers.iter().map(|l| l.baseline.size_bits).sum();
    let sc: u64 = layers.iter().map(|l| l.compressed.size_bits).sum();
    let bb: u64 = layers.iter().map(|l| l.baseline.bops).sum();
    let bc: u64 = layers.iter().map(|l| l.compressed.bops).sum();
    Ok(CompressionReport {
        arch: arch.name.clone(),
        size_bits_baseline: sb,
        size_bits_compressed: sc,
        bops_baseline: bb,
        bops_compressed: bc,
        size_ratio: sb as f64 / sc as f64,
        bops_ratio: bb as f64 / bc as f64,
        accounting: ACCOUNTING_NOTE.to_string(),
        layers,
    })
}

/// Plain-text table of a report.
pub fn render_table(r: &CompressionReport) -> String {
    let mut s = format!(
        "{:<24} {:>10} {:>14} {:>5} {:>5} {:>9} {:>12} {:>16}\n",
        "layer", "params", "MACs", "w", "a", "survival", "size_bits", "bops"
    );
    for l in &r.layers {
        let c = &l.compressed;
        s.push_str(&format!(
            "{:<24} {:>10} {:>14} {:>5} {:>5} {:>9.4} {:>12} {:>16}\n",
            c.name, c.params, c.macs, c.weight_bits, c.act_in_bits, c.survival, c.size_bits, c.bops
        ));
    }
    s.push_str(&format!(
        "size: {} -> {} bits ({:.3} MB -> {:.3} MB), ratio x{:.2}\n",
        r.size_bits_baseline,
        r.size_bits_compressed,
        r.size_bits_baseline as f64 / BITS_PER_MB,
        r.size_bits_compressed as f64 / BITS_PER_MB,
        r.size_ratio
    ));
    s.push_str(&format!(
        "bops: {} -> {}, ratio x{:.2}\n",
        r.bops_baseline, r.bops_compressed, r.bops_ratio
    ));
    s
}

pub const BUILTIN_ARCHS: [&str; 7] = [
    "resnet20",
    "resnet32",
    "resnet56",
    "resnet110",
    "vgg16",
    "desknet-s",
    "desknet-r8",
];

/// CIFAR ResNet: 3×3 stem to 16 channels, three stages of `(depth − 2)/6`
/// basic blocks at 16/32/64 channels, 1×1 projection shortcuts where the
/// shape changes, global pool, FC with bias.
pub fn resnet_cifar(depth: usize, classes: usize) -> Result<ArchDescriptor> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(Error::Config(format!("resnet depth {depth} is not 6n+2")));
    }
    let blocks = (depth - 2) / 6;
    let mut layers = vec![LayerSpec::conv("conv1", 3, 16, 3, 32, None)];
    let mut links = Vec::new();
    let mut producer = "conv1".to_string();
    let mut in_ch = 16;
    for (stage, (ch, hw)) in [(16, 32), (32, 16), (64, 8)].into_iter().enumerate() {
        for b in 0..blocks {
            let p = format!("layer{}.{b}", stage + 1);
            let c1 = format!("{p}.conv1");
            let c2 = format!("{p}.conv2");
            layers.push(LayerSpec::conv(
                &c1,
                in_ch,
                ch,
                3,
                hw,
                Some(producer.clone()),
            ));
            layers.push(LayerSpec::conv(&c2, ch, ch, 3, hw, Some(c1.clone())));
            let other = if in_ch != ch {
                let sc = format!("{p}.shortcut");
                layers.push(LayerSpec::conv(
                    &sc,
                    in_ch,
                    ch,
                    1,
                    hw,
                    Some(producer.clone()),
                ));
                sc
            } else {
                producer.clone()
            };
            links.push(ResidualLink {
                a: c2.clone(),
                b: other,
            });
            producer = c2;
            in_ch = ch;
        }
    }
    layers.push(LayerSpec::fc("fc", 64, classes, Some(producer)));
    let d = ArchDescriptor {
        name: format!("resnet{depth}"),
        layers,
        residual_links: links,
    };
    d.validate()?;
    Ok(d)
}

/// VGG-16 for 32×32 inputs: 13 bias-free 3×3 convs, classifier 512→512→classes.
pub fn vgg16_cifar(classes: usize) -> Result<ArchDescriptor> {
    const CFG: [Option<usize>; 18] = [
        Some(64),
        Some(64),
        None,
        Some(128),
        Some(128),
        None,
        Some(256),
        Some(256),
        Some(256),
        None,
        Some(512),
        Some(512),
        Some(512),
        None,
        Some(512),
        Some(512),
        Some(512),
        None,
    ];
    let mut layers = Vec::new();
    let (mut in_ch, mut hw) = (3, 32);
    let mut producer: Option<String> = None;
    for entry in CFG {
        match entry {
            Some(ch) => {
                let name = format!("features.{}", layers.len());
                layers.push(LayerSpec::conv(&name, in_ch, ch, 3, hw, producer.take()));
                producer = Some(name);
                in_ch = ch;
            }
            None => hw /= 2,
        }
    }
    layers.push(LayerSpec::fc("classifier.0", 512, 512, producer));
    layers.push(LayerSpec::fc(
        "classifier.1",
        512,
        classes,
        Some("classifier.0".into()),
    ));
    let d = ArchDescriptor {
        name: "vgg16".into(),
        layers,
        residual_links: Vec::new(),
    };
    d.validate()?;
    Ok(d)
}

pub fn builtin_arch(name: &str) -> Result<ArchDescriptor> {
    use rand::SeedableRng;
    let desk = |kind| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        crate::nn::Network::new(kind, 10, &mut rng).descriptor(32)
    };
    match name {
        "resnet20" => resnet_cifar(20, 10),
        "resnet32" => resnet_cifar(32, 10),
        "resnet56" => resnet_cifar(56, 10),
        "resnet110" => resnet_cifar(110, 10),
        "vgg16" => vgg16_cifar(10),
        "desknet-s" => desk(crate::nn::ModelKind::DesknetS),
        "desknet-r8" => desk(crate::nn::ModelKind::DesknetR8),
        other => Err(Error::Config(format!(
            "unknown architecture '{other}' (valid: {})",
            BUILTIN_ARCHS.join(", ")
        ))),
    }
}
