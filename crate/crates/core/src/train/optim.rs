use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fraction of the run after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_at: 0.6,
            decay_factor: 0.1,
        }
    }
}

impl SgdConfig {
    /// Learning rate at step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let boundary = (self.decay_at * total as f64).floor() as usize;
        if t >= boundary && total > 0 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

fn check(params: &Params, grads: &Params) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} params vs {} grads", params.len(), grads.len()),
        ));
    }
    for ((kp, p), (kg, g)) in params.iter().zip(grads.iter()) {
        if kp != kg || p.shape() != g.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("`{kp}` {:?} vs `{kg}` {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

fn zeros_like(params: &Params) -> BTreeMap<String, Vec<f64>> {
    params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect()
}

/// Heavy-ball SGD with L2 weight decay: `v ← μv + g + λp`, `p ← p − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Params,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        check(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = zeros_like(params);
        }
        for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            let v = self
                .velocity
                .get_mut(name)
                .ok_or_else(|| Error::shape("sgd", format!("no state for `{name}`")))?;
            let mut data = p.data().to_vec();
            for ((x, gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *x;
                *x -= lr * *vi;
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, c: &AdamConfig) -> Result<()> {
        check(params, grads)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((name, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::shape("adam", format!("no state for `{name}`"))),
            };
            let mut data = p.data().to_vec();
            for (((x, gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}
