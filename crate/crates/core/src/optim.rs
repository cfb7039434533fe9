//! Momentum SGD with L2 weight decay, and a multi-step learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T, weight_decay: T) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update and consumes the gradients.
    ///
    /// `grads[i]` must be present and shaped like `params[i]`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::MissingGradient(grads.len().min(params.len())));
        }
        let grads: Vec<Tensor<T>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.ok_or(Error::MissingGradient(i)))
            .collect::<Result<_>>()?;
        for (p, g) in params.iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + d;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Learning rate decayed by `gamma` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn new(base: f64, mut milestones: Vec<usize>, gamma: f64) -> Self {
        milestones.sort_unstable();
        Self {
            base,
            milestones,
            gamma,
        }
    }

    /// Milestones at the given fractions of `epochs`.
    pub fn at_fractions(base: f64, epochs: usize, fractions: &[f64], gamma: f64) -> Self {
        let ms = fractions
            .iter()
            .map(|f| (f * epochs as f64).round() as usize)
            .collect();
        Self::new(base, ms, gamma)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![one(1.0)];
        Sgd::new(0.1, 0.0, 0.0)
            .step(&mut p, vec![Some(one(0.5))])
            .unwrap();
        assert!((p[0].item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap()];
        let before = p.clone();
        Sgd::new(0.1, 0.9, 0.0)
            .step(&mut p, vec![Some(Tensor::zeros(&[3]))])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence_second_delta() {
        let (lr, g) = (0.1, 0.5);
        let mut opt = Sgd::new(lr, 0.9, 0.0);
        let mut p = vec![one(0.0)];
        opt.step(&mut p, vec![Some(one(g))]).unwrap();
        let after_one = p[0].item();
        opt.step(&mut p, vec![Some(one(g))]).unwrap();
        let second_delta = after_one - p[0].item();
        assert!((second_delta - lr * (g + 0.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut p = vec![one(2.0)];
        Sgd::new(0.1, 0.0, 0.5)
            .step(&mut p, vec![Some(one(0.0))])
            .unwrap();
        assert!((p[0].item() - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_or_misshaped_gradient_is_an_error() {
        let mut p = vec![one(1.0), one(2.0)];
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        assert!(matches!(
            opt.step(&mut p, vec![Some(one(1.0)), None]),
            Err(Error::MissingGradient(1))
        ));
        assert!(opt
            .step(&mut p, vec![Some(one(1.0)), Some(Tensor::zeros(&[2]))])
            .is_err());
    }

    #[test]
    fn multistep_schedule() {
        let s = MultiStepLr::at_fractions(0.01, 100, &[0.6, 0.8], 0.1);
        assert_eq!(s.milestones, vec![60, 80]);
        assert_eq!(s.lr_at(0), 0.01);
        assert!((s.lr_at(60) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(99) - 0.0001).abs() < 1e-15);
    }
}
