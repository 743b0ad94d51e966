//! Layers and the desk-scale networks trained by the pipelines.
//!
//! Conv and linear layers own full-precision shadow weights. When a
//! [`LayerQuant`] is installed, the forward pass runs on APoT-quantized
//! inputs and weights and the backward pass routes straight-through
//! gradients back into the shadow weights. Conv layers carry no bias, so a
//! masked filter produces an exactly-zero output channel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ArchDescriptor, LayerSpec, ResidualLink};
use crate::ops::{conv_out_extent, Conv2dOp, GlobalAvgPoolOp, LinearOp, ReluOp};
use crate::prune::PruneMask;
use crate::quant::{quantize_tensor_ste, QuantConfig, QuantTarget, DEGENERATE_ALPHA};
use crate::tensor::Tensor;

/// Quantizers for one layer's weights and input activations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuant {
    pub weight: QuantConfig,
    pub act: QuantConfig,
}

/// Running maximum of a layer's input activations.
///
/// While unfrozen, every training batch raises α to the largest value seen;
/// once frozen α stays fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActRange {
    pub alpha: Option<f32>,
    pub frozen: bool,
}

impl ActRange {
    fn observe(&mut self, x: &Tensor, train: bool) -> f32 {
        let batch_max = x.data().iter().copied().fold(0.0f32, f32::max);
        let alpha = match (self.alpha, train && !self.frozen) {
            (Some(a), true) => a.max(batch_max),
            (None, true) => batch_max,
            (Some(a), false) => a,
            (None, false) => batch_max,
        };
        if train && !self.frozen {
            self.alpha = Some(alpha);
        }
        if alpha > 0.0 {
            alpha
        } else {
            DEGENERATE_ALPHA
        }
    }
}

/// Quantizes the layer input if activation quantization is active.
fn quantize_input(
    x: &Tensor,
    quant: Option<&LayerQuant>,
    range: &mut ActRange,
    train: bool,
) -> Result<(Tensor, Option<Vec<bool>>)> {
    match quant {
        Some(q) if !q.act.is_passthrough() => {
            let alpha = range.observe(x, train);
            let s = quantize_tensor_ste(x, &q.act, QuantTarget::Activations { alpha })?;
            Ok((s.output, Some(s.pass)))
        }
        _ => Ok((x.clone(), None)),
    }
}

fn quantize_weight(w: &Tensor, quant: Option<&LayerQuant>) -> Result<(Tensor, Option<Vec<bool>>)> {
    match quant {
        Some(q) if !q.weight.is_passthrough() => {
            let s = quantize_tensor_ste(w, &q.weight, QuantTarget::Weights)?;
            Ok((s.output, Some(s.pass)))
        }
        _ => Ok((w.clone(), None)),
    }
}

fn gate(values: &mut [f32], pass: Option<&Vec<bool>>) {
    if let Some(pass) = pass {
        for (v, &p) in values.iter_mut().zip(pass) {
            if !p {
                *v = 0.0;
            }
        }
    }
}

/// Bias-free convolution with optional quantization and filter mask.
#[derive(Debug, Clone)]
pub struct QConv2d {
    pub name: String,
    pub weight: Tensor,
    pub mask: Option<PruneMask>,
    /// Masked filters receive zero gradient (permanent pruning).
    pub freeze_masked: bool,
    pub quant: Option<LayerQuant>,
    pub act_range: ActRange,
    /// Largest |output| seen on a masked channel since the last reset.
    pub masked_output_max: f32,
    op: Conv2dOp,
    act_pass: Option<Vec<bool>>,
    weight_pass: Option<Vec<bool>>,
}

impl QConv2d {
    pub fn new(name: &str, weight: Tensor, stride: usize, pad: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv weight must be OIHW, got {:?}",
                weight.shape()
            )));
        }
        Ok(QConv2d {
            name: name.to_string(),
            weight,
            mask: None,
            freeze_masked: false,
            quant: None,
            act_range: ActRange::default(),
            masked_output_max: 0.0,
            op: Conv2dOp::new(stride, pad),
            act_pass: None,
            weight_pass: None,
        })
    }

    /// He-normal initialization, std = sqrt(2 / fan_in).
    pub fn he_init(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..out_ch * fan_in)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let w = Tensor::new(&[out_ch, in_ch, kernel, kernel], data).expect("consistent shape");
        QConv2d::new(name, w, stride, pad).expect("rank-4 weight")
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.op.stride
    }

    pub fn pad(&self) -> usize {
        self.op.pad
    }

    pub fn filter_len(&self) -> usize {
        self.weight.numel() / self.out_channels()
    }

    /// Weights used by the forward pass: quantized shadow weights with masked filters zeroed.
    pub fn effective_weight(&self) -> Result<Tensor> {
        Ok(self.effective_weight_with_gate()?.0)
    }

    fn effective_weight_with_gate(&self) -> Result<(Tensor, Option<Vec<bool>>)> {
        let (mut w, pass) = quantize_weight(&self.weight, self.quant.as_ref())?;
        if let Some(mask) = &self.mask {
            crate::prune::zero_filters(&mut w, mask)?;
        }
        Ok((w, pass))
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (xq, act_pass) = quantize_input(x, self.quant.as_ref(), &mut self.act_range, train)?;
        let (w, weight_pass) = self.effective_weight_with_gate()?;
        let out = self.op.forward(&xq, &w, None)?;
        if let Some(mask) = &self.mask {
            let plane = out.shape()[2] * out.shape()[3];
            let o = out.shape()[1];
            for (c, chunk) in out.data().chunks(plane).enumerate() {
                if mask.is_pruned(c % o) {
                    let m = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
                    self.masked_output_max = self.masked_output_max.max(m);
                }
            }
        }
        self.act_pass = act_pass;
        self.weight_pass = weight_pass;
        out.check_finite("conv2d forward")?;
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (mut gx, mut gw, _) = self.op.backward(upstream)?;
        gate(gw.data_mut(), self.weight_pass.as_ref());
        if self.freeze_masked {
            if let Some(mask) = &self.mask {
                crate::prune::zero_filters(&mut gw, mask)?;
            }
        }
        self.weight.accumulate_grad(gw.data())?;
        gate(gx.data_mut(), self.act_pass.as_ref());
        Ok(gx)
    }
}

/// Fully-connected layer; never pruned, bias kept in full precision.
#[derive(Debug, Clone)]
pub struct QLinear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub quant: Option<LayerQuant>,
    pub act_range: ActRange,
    op: LinearOp,
    act_pass: Option<Vec<bool>>,
    weight_pass: Option<Vec<bool>>,
}

impl QLinear {
    pub fn new(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape(format!(
                "linear weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(QLinear {
            name: name.to_string(),
            weight,
            bias,
            quant: None,
            act_range: ActRange::default(),
            op: LinearOp::default(),
            act_pass: None,
            weight_pass: None,
        })
    }

    /// Normal init with std = sqrt(1 / fan_in), zero bias.
    pub fn init(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_features as f64).sqrt()).expect("positive std");
        let data = (0..in_features * out_features)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let w = Tensor::new(&[out_features, in_features], data).expect("consistent shape");
        QLinear::new(name, w, Tensor::zeros(&[out_features])).expect("consistent shapes")
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (xq, act_pass) = quantize_input(x, self.quant.as_ref(), &mut self.act_range, train)?;
        let (w, weight_pass) = quantize_weight(&self.weight, self.quant.as_ref())?;
        let out = self.op.forward(&xq, &w, Some(&self.bias))?;
        self.act_pass = act_pass;
        self.weight_pass = weight_pass;
        out.check_finite("linear forward")?;
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (mut gx, mut gw, gb) = self.op.backward(upstream)?;
        gate(gw.data_mut(), self.weight_pass.as_ref());
        self.weight.accumulate_grad(gw.data())?;
        self.bias.accumulate_grad(gb.data())?;
        gate(gx.data_mut(), self.act_pass.as_ref());
        Ok(gx)
    }
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`, shortcut being identity or a 1×1 projection.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: QConv2d,
    pub conv2: QConv2d,
    pub shortcut: Option<QConv2d>,
    relu1: ReluOp,
    relu_out: ReluOp,
}

impl ResidualBlock {
    pub fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = QConv2d::he_init(&format!("{prefix}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let conv2 = QConv2d::he_init(&format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            QConv2d::he_init(
                &format!("{prefix}.shortcut"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
                rng,
            )
        });
        ResidualBlock {
            conv1,
            conv2,
            shortcut,
            relu1: ReluOp::default(),
            relu_out: ReluOp::default(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(x, train)?;
        let h = self.relu1.forward(&h);
        let mut h = self.conv2.forward(&h, train)?;
        let s = match self.shortcut.as_mut() {
            Some(sc) => sc.forward(x, train)?,
            None => x.clone(),
        };
        if s.shape() != h.shape() {
            return Err(Error::Shape(format!(
                "residual branch {:?} does not match shortcut {:?}",
                h.shape(),
                s.shape()
            )));
        }
        for (a, &b) in h.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
        Ok(self.relu_out.forward(&h))
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(upstream)?;
        let gh = self.conv2.backward(&g)?;
        let gh = self.relu1.backward(&gh)?;
        let mut gx = self.conv1.backward(&gh)?;
        let gs = match self.shortcut.as_mut() {
            Some(sc) => sc.backward(&g)?,
            None => g,
        };
        for (a, &b) in gx.data_mut().iter_mut().zip(gs.data()) {
            *a += b;
        }
        Ok(gx)
    }

    fn convs(&self) -> Vec<&QConv2d> {
        let mut v = vec![&self.conv1, &self.conv2];
        v.extend(self.shortcut.as_ref());
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut QConv2d> {
        let mut v = vec![&mut self.conv1, &mut self.conv2];
        v.extend(self.shortcut.as_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Plain { conv: QConv2d, relu: ReluOp },
    Residual(ResidualBlock),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// conv 3→8, conv 8→16 (stride 2), global pool, FC.
    DesknetS,
    /// Stem 3→8, one residual block per stage at 8/16/32 channels, global pool, FC.
    DesknetR8,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::DesknetS => "desknet-s",
            ModelKind::DesknetR8 => "desknet-r8",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desknet-s" => Ok(ModelKind::DesknetS),
            "desknet-r8" => Ok(ModelKind::DesknetR8),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (valid: desknet-s, desknet-r8)"
            ))),
        }
    }
}

/// A trainable CNN built from [`Block`]s, global average pooling and one FC layer.
#[derive(Debug, Clone)]
pub struct Network {
    pub kind: ModelKind,
    pub blocks: Vec<Block>,
    pub fc: QLinear,
    pool: GlobalAvgPoolOp,
}

impl Network {
    pub fn new(kind: ModelKind, classes: usize, rng: &mut impl Rng) -> Self {
        let (blocks, features) = match kind {
            ModelKind::DesknetS => (
                vec![
                    Block::Plain {
                        conv: QConv2d::he_init("conv1", 3, 8, 3, 1, 1, rng),
                        relu: ReluOp::default(),
                    },
                    Block::Plain {
                        conv: QConv2d::he_init("conv2", 8, 16, 3, 2, 1, rng),
                        relu: ReluOp::default(),
                    },
                ],
                16,
            ),
            ModelKind::DesknetR8 => (
                vec![
                    Block::Plain {
                        conv: QConv2d::he_init("stem", 3, 8, 3, 1, 1, rng),
                        relu: ReluOp::default(),
                    },
                    Block::Residual(ResidualBlock::new("stage1", 8, 8, 1, rng)),
                    Block::Residual(ResidualBlock::new("stage2", 8, 16, 2, rng)),
                    Block::Residual(ResidualBlock::new("stage3", 16, 32, 2, rng)),
                ],
                32,
            ),
        };
        let fc = QLinear::init("fc", features, classes, rng);
        Network {
            kind,
            blocks,
            fc,
            pool: GlobalAvgPoolOp::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.fc.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for block in self.blocks.iter_mut() {
            h = match block {
                Block::Plain { conv, relu } => {
                    let y = conv.forward(&h, train)?;
                    relu.forward(&y)
                }
                Block::Residual(r) => r.forward(&h, train)?,
            };
        }
        let pooled = self.pool.forward(&h)?;
        self.fc.forward(&pooled, train)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let g = self.fc.backward(grad_logits)?;
        let mut g = self.pool.backward(&g)?;
        for block in self.blocks.iter_mut().rev() {
            g = match block {
                Block::Plain { conv, relu } => {
                    let gr = relu.backward(&g)?;
                    conv.backward(&gr)?
                }
                Block::Residual(r) => r.backward(&g)?,
            };
        }
        Ok(())
    }

    /// Conv layers in forward order.
    pub fn convs(&self) -> Vec<&QConv2d> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                Block::Plain { conv, .. } => vec![conv],
                Block::Residual(r) => r.convs(),
            })
            .collect()
    }

    pub fn convs_mut(&mut self) -> Vec<&mut QConv2d> {
        self.blocks
            .iter_mut()
            .flat_map(|b| match b {
                Block::Plain { conv, .. } => vec![conv],
                Block::Residual(r) => r.convs_mut(),
            })
            .collect()
    }

    /// Trainable tensors in a fixed order: conv weights, FC weight, FC bias.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for block in self.blocks.iter_mut() {
            match block {
                Block::Plain { conv, .. } => out.push(&mut conv.weight),
                Block::Residual(r) => {
                    out.push(&mut r.conv1.weight);
                    out.push(&mut r.conv2.weight);
                    if let Some(sc) = r.shortcut.as_mut() {
                        out.push(&mut sc.weight);
                    }
                }
            }
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    pub fn param_sizes(&mut self) -> Vec<usize> {
        self.params_mut().iter().map(|p| p.numel()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Installs quantizers on every conv and the FC layer. The first conv and
    /// the FC layer use `first_last_bits` for weights and input activations.
    pub fn set_quant(
        &mut self,
        weights: QuantConfig,
        acts: QuantConfig,
        first_last_bits: u32,
    ) -> Result<()> {
        weights.validate()?;
        acts.validate()?;
        if acts.signed {
            return Err(Error::Config(
                "activation quantizer must be unsigned".into(),
            ));
        }
        let edge = |c: QuantConfig| {
            if c.is_passthrough() {
                c
            } else {
                c.with_bits(first_last_bits)
            }
        };
        let edge_quant = LayerQuant {
            weight: edge(weights),
            act: edge(acts),
        };
        edge_quant.weight.validate()?;
        edge_quant.act.validate()?;
        let body = LayerQuant {
            weight: weights,
            act: acts,
        };
        for (i, conv) in self.convs_mut().into_iter().enumerate() {
            conv.quant = Some(if i == 0 { edge_quant } else { body });
        }
        self.fc.quant = Some(edge_quant);
        Ok(())
    }

    pub fn clear_quant(&mut self) {
        self.convs_mut().into_iter().for_each(|c| c.quant = None);
        self.fc.quant = None;
    }

    pub fn is_quantized(&self) -> bool {
        self.fc.quant.is_some()
    }

    /// Stops activation-range tracking on every layer.
    pub fn freeze_act_ranges(&mut self) {
        for c in self.convs_mut() {
            c.act_range.frozen = true;
        }
        self.fc.act_range.frozen = true;
    }

    pub fn reset_act_ranges(&mut self) {
        for c in self.convs_mut() {
            c.act_range = ActRange::default();
        }
        self.fc.act_range = ActRange::default();
    }

    pub fn reset_masked_output_max(&mut self) {
        self.convs_mut()
            .into_iter()
            .for_each(|c| c.masked_output_max = 0.0);
    }

    pub fn masked_output_max(&self) -> f32 {
        self.convs()
            .iter()
            .fold(0.0, |a, c| a.max(c.masked_output_max))
    }

    /// Static description of this network for size/BOPs accounting at a given input size.
    pub fn descriptor(&self, image_size: usize) -> Result<ArchDescriptor> {
        let mut layers = Vec::new();
        let mut links = Vec::new();
        let mut hw = image_size;
        let mut producer: Option<String> = None;
        let conv_spec = |c: &QConv2d,
                         hw: usize,
                         producer: Option<String>|
         -> Result<(LayerSpec, usize)> {
            let out = conv_out_extent(hw, c.kernel(), c.stride(), c.pad())
                .ok_or_else(|| Error::Descriptor(format!("{} does not fit {hw}x{hw}", c.name)))?;
            Ok((
                LayerSpec::conv(
                    &c.name,
                    c.in_channels(),
                    c.out_channels(),
                    c.kernel(),
                    out,
                    producer,
                ),
                out,
            ))
        };
        for block in &self.blocks {
            match block {
                Block::Plain { conv, .. } => {
                    let (spec, out) = conv_spec(conv, hw, producer.clone())?;
                    layers.push(spec);
                    hw = out;
                    producer = Some(conv.name.clone());
                }
                Block::Residual(r) => {
                    let (s1, out) = conv_spec(&r.conv1, hw, producer.clone())?;
                    let (s2, _) = conv_spec(&r.conv2, out, Some(r.conv1.name.clone()))?;
                    layers.push(s1);
                    layers.push(s2);
                    let other = match &r.shortcut {
                        Some(sc) => {
                            let (ss, _) = conv_spec(sc, hw, producer.clone())?;
                            layers.push(ss);
                            Some(sc.name.clone())
                        }
                        None => producer.clone(),
                    };
                    if let Some(other) = other {
                        links.push(ResidualLink {
                            a: r.conv2.name.clone(),
                            b: other,
                        });
                    }
                    hw = out;
                    producer = Some(r.conv2.name.clone());
                }
            }
        }
        layers.push(LayerSpec::fc(
            "fc",
            self.fc.weight.shape()[1],
            self.classes(),
            producer,
        ));
        let desc = ArchDescriptor {
            name: self.kind.name().to_string(),
            layers,
            residual_links: links,
        };
        desc.validate()?;
        Ok(desc)
    }
}
