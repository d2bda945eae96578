//! Adam for the statistics network of the MI estimator.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: i32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Descends `params` along `grads`; state is created on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract("one gradient per parameter is required"));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = S::one() - self.beta1.powi(self.step);
        let c2 = S::one() - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || m.shape() != p.shape() {
                return Err(Error::contract("parameter layout changed between Adam steps"));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gr), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * gr;
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * gr * gr;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Tensor::vector(vec![3.0f64, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[&g]).unwrap();
        }
        assert!(x.norm() < 1e-2, "{:?}", x);
    }
}
