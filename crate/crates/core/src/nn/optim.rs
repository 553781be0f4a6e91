use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← momentum·v + g; p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        if !(lr > T::zero()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config("parameter and gradient counts differ"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::config("optimizer state belongs to a different parameter set"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.len() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}
