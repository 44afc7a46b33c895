use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, t: 0, m, v }
    }

    pub fn for_model(model: &Model<T>, config: AdamConfig) -> Self {
        Self::new(model.params(), config)
    }

    /// Applies one update from the gradients accumulated on the model, then clears them.
    ///
    /// Parameters without an accumulated gradient are treated as having a zero gradient.
    pub fn step_model(&mut self, model: &mut Model<T>, lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        let grads: Vec<Tensor<T>> = params
            .iter_mut()
            .map(|p| p.take_grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        adam_step(&mut params, &grads, self, lr)
    }
}

/// Bias-corrected Adam update; increments `state.t` by one.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam got {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(format!(
                "adam shape mismatch: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let b1 = T::lit(beta1);
    let b2 = T::lit(beta2);
    let one = T::one();
    let corr1 = T::lit(1.0 - beta1.powi(t));
    let corr2 = T::lit(1.0 - beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let pd = p.data_mut();
        for (((w, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Staircase exponential learning-rate decay plus epoch/batch settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            decay_every: 30_000,
            decay_rate: 0.5,
            epochs: 100,
            batch_size: 128,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!(
                "decay_rate {} outside (0, 1]",
                self.decay_rate
            )));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "decay_every and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        lr_at(iteration, self)
    }
}

pub fn lr_at(iteration: u64, sched: &TrainSchedule) -> f64 {
    let k = (iteration / sched.decay_every) as i32;
    sched.lr0 * sched.decay_rate.powi(k)
}
