use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd { lr: 0.01, momentum: 0.9 }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// One update of every parameter from its gradient.
pub fn optimizer_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState, opt: &Optimizer) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        if matches!(opt, Optimizer::Adam { .. }) {
            state.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
    }
    state.step += 1;
    match *opt {
        Optimizer::Sgd { lr, momentum } => {
            for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
                for ((x, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *vi = momentum * *vi + gi;
                    *x -= lr * *vi;
                }
            }
        }
        Optimizer::Adam { lr, beta1, beta2, eps } => {
            let t = state.step as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
                for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![Tensor::from_slice(&[3.0])];
        let mut st = OptimState::default();
        optimizer_step(&mut p, &[Tensor::from_slice(&[1.0])], &mut st, &Optimizer::Sgd { lr: 1.0, momentum: 0.0 }).unwrap();
        assert_eq!(p[0].data(), &[2.0]);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![Tensor::from_slice(&[1.5, -2.0])];
        let mut st = OptimState::default();
        for _ in 0..3 {
            optimizer_step(&mut p, &[Tensor::zeros([2])], &mut st, &Optimizer::sgd()).unwrap();
        }
        assert_eq!(p[0].data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![Tensor::from_slice(&[0.0, 0.0])];
        let mut st = OptimState::default();
        optimizer_step(&mut p, &[Tensor::from_slice(&[0.3, -7.0])], &mut st, &Optimizer::adam()).unwrap();
        assert!((p[0].data()[0] + 1e-3).abs() < 1e-9);
        assert!((p[0].data()[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros([2])];
        let r = optimizer_step(&mut p, &[Tensor::zeros([3])], &mut OptimState::default(), &Optimizer::sgd());
        assert!(r.is_err());
    }
}
