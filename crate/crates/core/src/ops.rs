//! Differentiable kernels.
//!
//! Each op is a small stateful object: `forward` records what `backward`
//! needs, and calling `backward` first is a [`Error::State`]. Accumulation
//! order inside every kernel is fixed, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns `ox` whose input column `ox*stride + k - pad` lies in `[0, w)`.
#[inline]
fn valid_range(out: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if w + pad > k {
        ((w - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    expect_rank(input, 4, "conv input")?;
    expect_rank(weight, 4, "conv weight")?;
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (o, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if c != wc {
        return Err(Error::Shape(format!(
            "conv input has {c} channels but weight expects {wc} (input {:?}, weight {:?})",
            input.shape(),
            weight.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?}, expected [{o}]",
                b.shape()
            )));
        }
    }
    if stride == 0 {
        return Err(Error::Shape("conv stride must be at least 1".into()));
    }
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        }),
        _ => Err(Error::Shape(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}"
        ))),
    }
}

/// Direct NCHW x OIHW convolution. Each output accumulates bias, then input
/// channels, then kernel rows, then kernel columns.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, stride, pad)?;
    let x = input.data();
    let wt = weight.data();
    let plane = g.oh * g.ow;
    let mut out = vec![T::ZERO; g.n * g.o * plane];
    for b in 0..g.n {
        for oc in 0..g.o {
            let dst = &mut out[(b * g.o + oc) * plane..(b * g.o + oc + 1) * plane];
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias.data()[oc]);
            }
            for ic in 0..g.c {
                let src = &x[(b * g.c + ic) * g.h * g.w..(b * g.c + ic + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let wv = wt[((oc * g.c + ic) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.pad;
                                for (d, &s) in drow[ox_lo..ox_hi].iter_mut().zip(&row[ix0..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, weight, None, stride, pad)?;
    if upstream.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match conv output [{}, {}, {}, {}]",
            upstream.shape(),
            g.n,
            g.o,
            g.oh,
            g.ow
        )));
    }
    let x = input.data();
    let wt = weight.data();
    let gy = upstream.data();
    let plane = g.oh * g.ow;
    let mut gx = vec![T::ZERO; x.len()];
    let mut gw = vec![T::ZERO; wt.len()];
    let mut gb = vec![T::ZERO; g.o];
    for b in 0..g.n {
        for oc in 0..g.o {
            let up = &gy[(b * g.o + oc) * plane..(b * g.o + oc + 1) * plane];
            gb[oc] += up.iter().copied().sum::<T>();
            for ic in 0..g.c {
                let base = (b * g.c + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let widx = ((oc * g.c + ic) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        let mut acc = T::ZERO;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                            let roff = base + iy * g.w;
                            for ox in ox_lo..ox_hi {
                                let ix = roff + ox * g.stride + kx - g.pad;
                                acc += urow[ox] * x[ix];
                                gx[ix] += wv * urow[ox];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[g.o], gb)?,
    ))
}

#[derive(Debug, Clone)]
struct ConvSaved<T: Scalar> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

/// Convolution with saved state for backward.
#[derive(Debug, Clone)]
pub struct Conv2dOp<T: Scalar = f32> {
    pub stride: usize,
    pub pad: usize,
    saved: Option<ConvSaved<T>>,
}

impl<T: Scalar> Conv2dOp<T> {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dOp {
            stride,
            pad,
            saved: None,
        }
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let out = conv2d_forward(input, weight, bias, self.stride, self.pad)?;
        self.saved = Some(ConvSaved {
            input: input.clone(),
            weight: weight.clone(),
        });
        Ok(out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("conv2d backward called before forward".into()))?;
        conv2d_grads(&saved.input, &saved.weight, upstream, self.stride, self.pad)
    }
}

/// `input (N×F) · weightᵀ (F×C) + bias`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    expect_rank(input, 2, "linear input")?;
    expect_rank(weight, 2, "linear weight")?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let (c, wf) = (weight.shape()[0], weight.shape()[1]);
    if f != wf {
        return Err(Error::Shape(format!(
            "linear input has {f} features but weight expects {wf}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "linear bias shape {:?}, expected [{c}]",
                b.shape()
            )));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::ZERO; n * c];
    for i in 0..n {
        let xr = &x[i * f..(i + 1) * f];
        for j in 0..c {
            let wr = &w[j * f..(j + 1) * f];
            let mut acc = bias.map_or(T::ZERO, |b| b.data()[j]);
            for (&a, &b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            out[i * c + j] = acc;
        }
    }
    Tensor::new(&[n, c], out)
}

#[derive(Debug, Clone)]
pub struct LinearOp<T: Scalar = f32> {
    saved: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for LinearOp<T> {
    fn default() -> Self {
        LinearOp { saved: None }
    }
}

impl<T: Scalar> LinearOp<T> {
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let out = linear_forward(input, weight, bias)?;
        self.saved = Some((input.clone(), weight.clone()));
        Ok(out)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (input, weight) = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("linear backward called before forward".into()))?;
        let (n, f) = (input.shape()[0], input.shape()[1]);
        let c = weight.shape()[0];
        if upstream.shape() != [n, c] {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match linear output [{n}, {c}]",
                upstream.shape()
            )));
        }
        let (x, w, gy) = (input.data(), weight.data(), upstream.data());
        let mut gx = vec![T::ZERO; n * f];
        let mut gw = vec![T::ZERO; c * f];
        let mut gb = vec![T::ZERO; c];
        for i in 0..n {
            for j in 0..c {
                let g = gy[i * c + j];
                gb[j] += g;
                let wr = &w[j * f..(j + 1) * f];
                let xr = &x[i * f..(i + 1) * f];
                for k in 0..f {
                    gx[i * f + k] += g * wr[k];
                    gw[j * f + k] += g * xr[k];
                }
            }
        }
        Ok((
            Tensor::new(&[n, f], gx)?,
            Tensor::new(&[c, f], gw)?,
            Tensor::new(&[c], gb)?,
        ))
    }
}

/// Rectifier. The subgradient at exactly zero is zero.
#[derive(Debug, Clone)]
pub struct ReluOp<T: Scalar = f32> {
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Default for ReluOp<T> {
    fn default() -> Self {
        ReluOp { saved: None }
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

impl<T: Scalar> ReluOp<T> {
    pub fn forward(&mut self, input: &Tensor<T>) -> Tensor<T> {
        self.saved = Some(input.clone());
        relu(input)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("relu backward called before forward".into()))?;
        if x.shape() != upstream.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match relu output {:?}",
                upstream.shape(),
                x.shape()
            )));
        }
        let g = x
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
            .collect();
        Tensor::new(x.shape(), g)
    }
}

/// Spatial mean per channel: NCHW → N×C.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 4, "pool input")?;
    let s = input.shape();
    let plane = s[2] * s[3];
    let inv = T::ONE / T::from_usize(plane);
    let out = input
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[s[0], s[1]], out)
}

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPoolOp {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPoolOp {
    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let out = global_avg_pool(input)?;
        self.input_shape = Some(input.shape().to_vec());
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self
            .input_shape
            .as_ref()
            .ok_or_else(|| Error::State("pool backward called before forward".into()))?;
        if upstream.shape() != [s[0], s[1]] {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match pool output [{}, {}]",
                upstream.shape(),
                s[0],
                s[1]
            )));
        }
        let plane = s[2] * s[3];
        let inv = T::ONE / T::from_usize(plane);
        let mut g = Vec::with_capacity(upstream.numel() * plane);
        for &u in upstream.data() {
            g.extend(std::iter::repeat_n(u * inv, plane));
        }
        Tensor::new(s, g)
    }
}

/// Mean softmax cross-entropy over the batch and its gradient `(softmax − onehot)/N`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    expect_rank(logits, 2, "logits")?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let inv_n = T::ONE / T::from_usize(n);
    let mut loss = T::ZERO;
    let mut grad = vec![T::ZERO; n * c];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let max = row
            .iter()
            .copied()
            .fold(row[0], |a, b| if b > a { b } else { a });
        let mut denom = T::ZERO;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[label] - max);
        for j in 0..c {
            let p = (row[j] - max - log_denom).exp();
            let onehot = if j == label { T::ONE } else { T::ZERO };
            grad[i * c + j] = (p - onehot) * inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(&[n, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_zero_weight_gives_zero() {
        let x =
            Tensor::<f32>::new(&[1, 2, 4, 4], (0..32).map(|v| v as f32 - 7.0).collect()).unwrap();
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_output_extent_formula() {
        let x = Tensor::<f32>::zeros(&[1, 1, 7, 6]);
        let w = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
        assert_eq!(conv_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_before_forward_is_state_error() {
        let mut op = Conv2dOp::<f32>::new(1, 0);
        let g = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(op.backward(&g), Err(Error::State(_))));
        let mut lin = LinearOp::<f32>::default();
        assert!(matches!(
            lin.backward(&Tensor::zeros(&[1, 1])),
            Err(Error::State(_))
        ));
        let mut r = ReluOp::<f32>::default();
        assert!(matches!(
            r.backward(&Tensor::zeros(&[1])),
            Err(Error::State(_))
        ));
        let mut p = GlobalAvgPoolOp::default();
        assert!(matches!(
            p.backward(&Tensor::<f32>::zeros(&[1, 1])),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let x =
            Tensor::<f32>::new(&[2, 2, 4, 4], (0..64).map(|v| (v as f32).sin()).collect()).unwrap();
        let w =
            Tensor::<f32>::new(&[3, 2, 3, 3], (0..54).map(|v| (v as f32).cos()).collect()).unwrap();
        let mut op = Conv2dOp::new(1, 1);
        let y = op.forward(&x, &w, None).unwrap();
        let (gx, gw, gb) = op.backward(&Tensor::zeros(y.shape())).unwrap();
        assert!(gx
            .data()
            .iter()
            .chain(gw.data())
            .chain(gb.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_rejects_wrong_upstream_shape() {
        let mut op = Conv2dOp::<f32>::new(1, 0);
        op.forward(
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            None,
        )
        .unwrap();
        assert!(matches!(
            op.backward(&Tensor::zeros(&[1, 1, 2, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_element_kernel_weight_grad_is_input_times_upstream() {
        // 1x1 conv on a 1-channel input: y = w*x, so dL/dw = sum_b sum_px x*g.
        let x = Tensor::<f64>::new(&[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0])
            .unwrap();
        let w = Tensor::<f64>::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let g = Tensor::<f64>::new(&[2, 1, 2, 2], vec![0.1, 0.2, 0.3, 0.4, 1.0, 1.0, -1.0, 2.0])
            .unwrap();
        let mut op = Conv2dOp::new(1, 0);
        op.forward(&x, &w, None).unwrap();
        let (gx, gw, gb) = op.backward(&g).unwrap();
        let expect: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((gw.data()[0] - expect).abs() < 1e-12);
        assert!((gb.data()[0] - g.data().iter().sum::<f64>()).abs() < 1e-12);
        for (a, b) in gx.data().iter().zip(g.data()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        let mut eye = Tensor::<f32>::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let zero_b = Tensor::zeros(&[3]);
        assert_eq!(
            linear_forward(&x, &eye, Some(&zero_b)).unwrap().data(),
            x.data()
        );

        let b = Tensor::<f32>::new(&[2], vec![0.25, -4.0]).unwrap();
        let w = Tensor::<f32>::new(&[2, 3], vec![1.0; 6]).unwrap();
        let y = linear_forward(&Tensor::zeros(&[3, 3]), &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn relu_values_and_kink() {
        let x = Tensor::<f32>::new(&[3], vec![-2.5, 0.0, 1.5]).unwrap();
        let mut op = ReluOp::default();
        assert_eq!(op.forward(&x).data(), &[0.0, 0.0, 1.5]);
        let g = op.backward(&Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_over_constant_plane() {
        let x = Tensor::<f32>::full(&[2, 3, 4, 4], 1.75);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad.data()[0] - (0.1 - 1.0) / 3.0).abs() < 1e-12);
        assert!((grad.data()[1] - 0.1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_goes_to_zero() {
        let mut logits = Tensor::<f32>::zeros(&[1, 4]);
        logits.data_mut()[2] = 200.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Index(_))
        ));
    }
}
