//! Adaptive-moment optimizer and late-update gradient accumulation.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GradSet;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over one parameter group.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &GradSet<T>) -> Result<()> {
        if params.len() != grads.tensors.len() || params.len() != self.m.len() {
            return Err(Error::Shape("optimizer group does not match parameters".into()));
        }
        if grads.tensors.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(c.beta1, t);
        let bc2 = 1.0 - Float::powi(c.beta2, t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Averages gradients over `period` minibatches and releases the mean.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T> {
    period: usize,
    count: usize,
    mean: Option<GradSet<T>>,
}

impl<T: Real> GradAccumulator<T> {
    pub fn new(period: usize) -> Result<Self> {
        if period < 1 {
            return Err(Error::Config("accumulation period must be at least 1".into()));
        }
        Ok(GradAccumulator {
            period,
            count: 0,
            mean: None,
        })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Adds one minibatch; returns the averaged gradient when the period is
    /// complete.
    pub fn push(&mut self, grads: GradSet<T>) -> Option<GradSet<T>> {
        self.count += 1;
        match &mut self.mean {
            // running mean, exact when every minibatch agrees
            Some(mean) => {
                let k = T::from_usize(self.count).expect("small count");
                for (m, g) in mean.tensors.iter_mut().zip(&grads.tensors) {
                    for (m, &g) in m.data_mut().iter_mut().zip(g.data()) {
                        *m += (g - *m) / k;
                    }
                }
            }
            None => self.mean = Some(grads),
        }
        if self.count == self.period {
            self.flush()
        } else {
            None
        }
    }

    /// Releases the mean of whatever is pending (the partial tail of an
    /// epoch), if anything.
    pub fn flush(&mut self) -> Option<GradSet<T>> {
        let mean = self.mean.take()?;
        self.count = 0;
        Some(mean)
    }
}
