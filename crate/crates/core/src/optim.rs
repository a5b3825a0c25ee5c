//! Adaptive-moment gradient descent.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with one learning rate per parameter tensor. Moments are kept in
/// 64-bit regardless of the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lrs: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new<T: Scalar>(params: &[Tensor<T>], lrs: Vec<f64>) -> Self {
        assert_eq!(params.len(), lrs.len(), "one learning rate per parameter");
        Self {
            lrs,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update; parameters with `None` gradients are left as is
    /// and their moments are not advanced.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.t += 1;
        let bc1 = 1.0 - libm::pow(BETA1, self.t as f64);
        let bc2 = 1.0 - libm::pow(BETA2, self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let lr = self.lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let upd = lr * (*mi / bc1) / (libm::sqrt(*vi / bc2) + EPSILON);
                *x = T::of(x.f64() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(1, 1, 2, vec![1.0f64, -1.0]).unwrap()];
        let g = vec![Some(Tensor::new(1, 1, 2, vec![3.0, -0.5]).unwrap())];
        let mut opt = Adam::new(&p, vec![0.1]);
        opt.step(&mut p, &g);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(1, 1, 1, vec![5.0f64]).unwrap()];
        let mut opt = Adam::new(&p, vec![0.1]);
        for _ in 0..500 {
            let g = vec![Some(p[0].map(|x| 2.0 * (x - 2.0)))];
            opt.step(&mut p, &g);
        }
        assert!((p[0].data()[0] - 2.0).abs() < 1e-2);
    }
}
