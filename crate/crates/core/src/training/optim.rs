//! Bias-corrected Adam with optional global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::params::ParamStore;
use crate::training::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    /// Gradients are rescaled to this global norm when they exceed it.
    pub clip_norm: Option<T>,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
            clip_norm: Some(T::lit(5.0)),
        }
    }
}

impl<T: Scalar> AdamConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let (z, one) = (T::zero(), T::one());
        if !(self.lr >= z) {
            return Err(Error::InvalidParam(format!("lr must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= z && b < one) {
                return Err(Error::InvalidParam(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > z) {
            return Err(Error::InvalidParam("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained NaN/inf; parameters were left untouched.
    SkippedNonFinite,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig<T>,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment estimates for checkpointing: `(param index, m, v)`.
    pub fn moments(&self) -> impl Iterator<Item = (usize, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((i, m.as_ref()?, v.as_ref()?)))
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(usize, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        for (i, m, v) in moments {
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            self.m[i] = Some(m);
            self.v[i] = Some(v);
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<StepOutcome> {
        if !grads.is_finite() {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        let mut clip = T::one();
        if let Some(max) = self.cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > max {
                clip = max / norm;
            }
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let t = T::lit(self.step as f64);
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.cfg;
        let bc1 = T::one() - beta1.powf(t);
        let bc2 = T::one() - beta2.powf(t);
        for (id, g) in grads.params() {
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = beta1 * *mi + (T::one() - beta1) * gi;
                *vi = beta2 * *vi + (T::one() - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Single Adam update of a flat parameter vector; stateless convenience for
/// callers that keep their own moment buffers.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig<T>,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Shape("adam_step buffers differ in length".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let t = T::lit(step as f64);
    let bc1 = T::one() - cfg.beta1.powf(t);
    let bc2 = T::one() - cfg.beta2.powf(t);
    for i in 0..params.len() {
        m[i] = cfg.beta1 * m[i] + (T::one() - cfg.beta1) * grads[i];
        v[i] = cfg.beta2 * v[i] + (T::one() - cfg.beta2) * grads[i] * grads[i];
        params[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.epsilon);
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig<f64> {
        AdamConfig {
            lr,
            clip_norm: None,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for step in 1..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, step, &cfg(0.1)).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = vec![0.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut last = 0.0;
        for step in 1..=2000 {
            let before = p[0];
            adam_step(&mut p, &[-3.0], &mut m, &mut v, step, &cfg(0.01)).unwrap();
            last = p[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w: Vec<f64> = vec![1.0, -0.7, 0.3, 2.0];
        let start: f64 = w.iter().map(|x| x * x).sum();
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for step in 1..=500 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut w, &g, &mut m, &mut v, step, &cfg(1e-2)).unwrap();
        }
        let end: f64 = w.iter().map(|x| x * x).sum();
        assert!(end < 1e-4 * start, "{end} vs {start}");
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![1.0];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let out = adam_step(&mut p, &[f64::NAN], &mut m, &mut v, 1, &cfg(0.1)).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::<f64>::default().validate().is_ok());
        assert!(AdamConfig {
            beta1: 1.0,
            ..AdamConfig::<f64>::default()
        }
        .validate()
        .is_err());
        assert!(AdamConfig {
            lr: -1.0,
            ..AdamConfig::<f64>::default()
        }
        .validate()
        .is_err());
    }
}
