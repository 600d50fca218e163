//! Truncated-BPTT training of the sine forecaster.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::SineDataset;
use crate::error::{Error, Result};
use crate::metrics::rmse_scalar;
use crate::network::forecaster::{column, Forecaster};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::loss::mse;
use crate::training::optim::{Adam, AdamConfig, StepOutcome};
use crate::training::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineTrainConfig {
    pub epochs: usize,
    /// Truncation length of backpropagation through time.
    pub chunk: usize,
    /// Sequences per update; 0 uses every training sequence.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Cosine decay of the learning rate to `lr * lr_floor` over the run.
    pub cosine: bool,
    pub lr_floor: f64,
    /// Leading steps whose predictions are excluded from loss and metrics;
    /// the direction of a sinusoid is unknowable from a single sample.
    pub warmup: usize,
    /// Closed-loop steps rolled out (with gradient) after every chunk.
    pub free_run: usize,
    pub free_run_weight: f64,
    /// Stop after this many epochs without validation improvement (0 = off).
    pub patience: usize,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SineTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            chunk: 100,
            batch: 16,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            cosine: true,
            lr_floor: 1e-3,
            warmup: 10,
            free_run: 0,
            free_run_weight: 1.0,
            patience: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_fit_rmse: Vec<f64>,
    pub val_forecast_rmse: Vec<f64>,
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineEval {
    pub fit_rmse: Vec<f64>,
    pub forecast_rmse: Vec<f64>,
    /// Per sequence `(fit predictions, forecast predictions)`.
    #[serde(skip)]
    pub predictions: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Fit and closed-loop forecast errors over the given sequences.
pub fn evaluate_sine<T: Scalar>(
    model: &Forecaster<T>,
    ds: &SineDataset,
    indices: &[usize],
    warmup: usize,
) -> Result<SineEval> {
    let seqs: Vec<&[f64]> = indices.iter().map(|&i| ds.sequences[i].values.as_slice()).collect();
    let (fit_steps, fc_steps) = (ds.spec.steps, ds.spec.forecast_steps);
    let preds = model.predict_sequences(&seqs, fit_steps, fc_steps)?;
    let mut fit_rmse = Vec::new();
    let mut forecast_rmse = Vec::new();
    for (seq, (fit, fc)) in seqs.iter().zip(&preds) {
        // fit[i] predicts y[i + 1]
        let start = warmup.min(fit.len().saturating_sub(1));
        fit_rmse.push(rmse_scalar(&fit[start..], &seq[start + 1..fit.len() + 1])?);
        if !fc.is_empty() {
            forecast_rmse.push(rmse_scalar(fc, &seq[fit_steps..fit_steps + fc.len()])?);
        }
    }
    Ok(SineEval {
        fit_rmse,
        forecast_rmse,
        predictions: preds,
    })
}

fn lr_at(cfg: &SineTrainConfig, epoch: usize) -> f64 {
    if !cfg.cosine || cfg.epochs <= 1 {
        return cfg.lr;
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    let floor = cfg.lr * cfg.lr_floor;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct SineTrainer<T> {
    pub cfg: SineTrainConfig,
    pub adam: Adam<T>,
    /// Completed epochs. The shuffle of epoch `e` depends only on the seed
    /// and `e`, so setting this field is enough to resume.
    pub epoch: usize,
}

impl<T: Scalar> SineTrainer<T> {
    pub fn new(cfg: SineTrainConfig) -> Result<Self> {
        if cfg.chunk == 0 {
            return Err(Error::Config("chunk must be >= 1".into()));
        }
        let adam = Adam::new(AdamConfig {
            lr: T::lit(cfg.lr),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            epsilon: T::lit(cfg.epsilon),
            clip_norm: (cfg.clip_norm > 0.0).then(|| T::lit(cfg.clip_norm)),
        })?;
        Ok(Self { cfg, adam, epoch: 0 })
    }

    /// Learning rate the next epoch will use.
    pub fn current_lr(&self) -> f64 {
        lr_at(&self.cfg, self.epoch)
    }

    /// One pass over the training sequences. Returns the mean chunk loss.
    pub fn train_epoch(&mut self, model: &mut Forecaster<T>, ds: &SineDataset) -> Result<(f64, usize)> {
        if ds.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let lr = self.current_lr();
        self.adam.cfg.lr = T::lit(lr);
        let mut order = ds.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5EED_0F_5111E);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        let batch = if self.cfg.batch == 0 {
            order.len()
        } else {
            self.cfg.batch
        };
        let steps = ds.spec.steps;
        let (mut loss_sum, mut loss_n, mut skipped) = (0.0, 0usize, 0usize);
        for group in order.chunks(batch) {
            let seqs: Vec<&[f64]> = group.iter().map(|&i| ds.sequences[i].values.as_slice()).collect();
            let mut state = model.zero_state(seqs.len());
            let mut k = 0;
            // inputs y[k], targets y[k+1], all within the fit segment
            while k + 1 < steps {
                let len = self.cfg.chunk.min(steps - 1 - k);
                let inputs: Vec<Tensor<T>> = (k..k + len).map(|t| column(seqs.iter().map(|s| s[t]))).collect();
                let mut tape = Tape::new();
                let (preds, live) = model.run_teacher_forced(&mut tape, &inputs, &state)?;
                let next = Forecaster::capture(&tape, &live);
                let first = self.cfg.warmup.saturating_sub(k).min(len);
                let mut terms: Vec<Var> = Vec::new();
                if first < len {
                    let p = tape.concat_rows(&preds[first..])?;
                    let target: Tensor<T> = Tensor::concat_rows(
                        &(k + first..k + len)
                            .map(|t| column(seqs.iter().map(|s| s[t + 1])))
                            .collect::<Vec<Tensor<T>>>()
                            .iter()
                            .collect::<Vec<_>>(),
                    )?;
                    terms.push(mse(&mut tape, p, &target)?);
                }
                let fr = self.cfg.free_run.min(steps.saturating_sub(k + len + 1));
                if fr > 0 && first < len {
                    let last = *preds.last().expect("len >= 1");
                    let (rolled, _) = model.roll_from(&mut tape, last, fr, live)?;
                    let p = tape.concat_rows(&rolled)?;
                    let target: Tensor<T> = Tensor::concat_rows(
                        &(k + len + 1..k + len + 1 + fr)
                            .map(|t| column(seqs.iter().map(|s| s[t])))
                            .collect::<Vec<Tensor<T>>>()
                            .iter()
                            .collect::<Vec<_>>(),
                    )?;
                    let m = mse(&mut tape, p, &target)?;
                    terms.push(tape.scale(m, T::lit(self.cfg.free_run_weight)));
                }
                if let Some(&first_term) = terms.first() {
                    let mut loss = first_term;
                    for &t in &terms[1..] {
                        loss = tape.add(loss, t)?;
                    }
                    let lv = tape.value(loss).get(0, 0).as_f64();
                    let grads = tape.backward(loss)?;
                    if !lv.is_finite() {
                        return Err(Error::Diverged {
                            epoch: self.epoch,
                            loss: lv,
                        });
                    }
                    if self.adam.step(&mut model.store, &grads)? == StepOutcome::SkippedNonFinite {
                        skipped += 1;
                    }
                    loss_sum += lv;
                    loss_n += 1;
                }
                state = next;
                k += len;
            }
        }
        self.epoch += 1;
        Ok((loss_sum / loss_n.max(1) as f64, skipped))
    }
}
