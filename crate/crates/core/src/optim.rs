//! SGD with momentum and L2 weight decay folded into the gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f32 = 5e-4;

/// Per-parameter optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<f32>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr: f32,
}

impl OptimState {
    pub fn new(numel: usize, lr: f32, momentum: f32, weight_decay: f32) -> Self {
        OptimState {
            velocity: vec![0.0; numel],
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(param: &mut Tensor, state: &mut OptimState) -> Result<()> {
    if state.velocity.len() != param.numel() {
        return Err(Error::Shape(format!(
            "velocity of length {} for parameter {:?}",
            state.velocity.len(),
            param.shape()
        )));
    }
    let grad = param
        .grad()
        .ok_or_else(|| Error::State("sgd step on a parameter without gradient".into()))?
        .to_vec();
    let (m, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    for ((p, v), g) in param
        .data_mut()
        .iter_mut()
        .zip(state.velocity.iter_mut())
        .zip(grad)
    {
        *v = m * *v + g + wd * *p;
        *p -= lr * *v;
    }
    param.check_finite("sgd_step")
}

/// One [`OptimState`] per parameter, in the model's parameter order.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub states: Vec<OptimState>,
}

impl Sgd {
    pub fn new(param_sizes: &[usize], lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            states: param_sizes
                .iter()
                .map(|&n| OptimState::new(n, lr, momentum, weight_decay))
                .collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    pub fn lr(&self) -> f32 {
        self.states.first().map_or(0.0, |s| s.lr)
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::State(format!(
                "{} parameters for {} optimizer states",
                params.len(),
                self.states.len()
            )));
        }
        for (p, s) in params.into_iter().zip(self.states.iter_mut()) {
            sgd_step(p, s)?;
        }
        Ok(())
    }

    /// Clears the momentum of whole output filters of parameter `index`,
    /// where each filter spans `filter_len` consecutive values.
    pub fn clear_filters(&mut self, index: usize, filter_len: usize, filters: &[usize]) {
        let v = &mut self.states[index].velocity;
        for &f in filters {
            v[f * filter_len..(f + 1) * filter_len]
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = param(&[1.0, -2.0, 0.5], &[0.25, 1.0, -0.5]);
        let mut s = OptimState::new(3, 1.0, 0.0, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.data(), &[0.75, -3.0, 1.0]);
    }

    #[test]
    fn zero_gradient_keeps_param() {
        let mut p = param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut s = OptimState::new(2, 0.1, 0.9, 0.0);
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut s = OptimState::new(1, 0.1, 0.9, 5e-4);
        assert!(matches!(sgd_step(&mut p, &mut s), Err(Error::State(_))));
    }

    #[test]
    fn two_step_manual_trace() {
        // lr 0.1, momentum 0.9, wd 5e-4, param 1.0, grads 0.5 then -0.2.
        // step 1: v = 0.5 + 0.0005        = 0.5005;   p = 1 - 0.05005          = 0.94995
        // step 2: v = 0.9*0.5005 - 0.2 + 0.0005*0.94995
        //           = 0.45045 - 0.2 + 0.000474975 = 0.250924975
        //         p = 0.94995 - 0.0250924975 = 0.9248575025
        let mut p = param(&[1.0], &[0.5]);
        let mut s = OptimState::new(1, 0.1, 0.9, 5e-4);
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.data()[0] - 0.94995).abs() < 1e-6);
        assert!((s.velocity[0] - 0.5005).abs() < 1e-6);
        p.set_grad(vec![-0.2]).unwrap();
        sgd_step(&mut p, &mut s).unwrap();
        assert!((s.velocity[0] - 0.250924975).abs() < 1e-6);
        assert!((p.data()[0] - 0.9248575025).abs() < 1e-6);
    }

    #[test]
    fn clear_filters_zeroes_velocity_rows() {
        let mut opt = Sgd::new(&[6], 0.1, 0.9, 0.0);
        opt.states[0].velocity = vec![1.0; 6];
        opt.clear_filters(0, 2, &[1]);
        assert_eq!(opt.states[0].velocity, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
