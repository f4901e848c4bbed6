//! Gradient-based parameter updates.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with optional decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::zero(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. `params` and `grads` must keep the same order
    /// and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameter list".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Shape(format!(
                    "grad length {} for parameter of shape {:?}",
                    g.len(),
                    p.shape()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("non-finite gradient".into()));
            }
        }
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if self.weight_decay > T::zero() {
                    data[j] -= self.lr * self.weight_decay * data[j];
                }
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over several gradient buffers.
pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> T {
    grads.iter().flat_map(|g| g.iter()).map(|&x| x * x).sum::<T>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = global_norm(&grads.iter().map(Vec::as_slice).collect::<Vec<_>>());
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= s);
    }
    norm
}
