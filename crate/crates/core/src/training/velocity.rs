//! Training and evaluation of the velocity model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::velocity::VelocitySample;
use crate::datasets::VelocityRecord;
use crate::encoding::batch_samples;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::neurove::{LayerTelemetry, Mode, NeuroVe, VELOCITY_COLUMNS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::loss::{update_loss_scales, velocity_loss_parts, LossScaleState};
use crate::training::optim::{Adam, AdamConfig, StepOutcome};
use crate::training::tape::{Gradients, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// EMA factor of the part-gradient norms used for loss balancing.
    pub scale_decay: f64,
    /// Keep both loss scales at 1.
    pub fixed_scales: bool,
    pub cosine: bool,
    pub lr_floor: f64,
    pub patience: usize,
    /// Train on randomly mirrored and polarity-swapped copies of the samples.
    pub augment: bool,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for VelocityTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            scale_decay: 0.99,
            fixed_scales: false,
            cosine: true,
            lr_floor: 0.05,
            patience: 0,
            augment: true,
            seed: 0,
        }
    }
}

pub(crate) fn cosine_lr(lr: f64, floor: f64, cosine: bool, epochs: usize, epoch: usize) -> f64 {
    if !cosine || epochs <= 1 {
        return lr;
    }
    let progress = (epoch as f64 / (epochs - 1) as f64).min(1.0);
    let low = lr * floor;
    low + 0.5 * (lr - low) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_angular: f64,
    pub train_linear: f64,
    pub scale_a: f64,
    pub scale_l: f64,
    pub skipped_steps: usize,
    pub firing: Vec<LayerTelemetry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityEval {
    pub report: MetricReport,
    pub firing: Vec<LayerTelemetry>,
    #[serde(skip)]
    pub predictions: Vec<Vec<VelocityRecord>>,
}

impl VelocityEval {
    pub fn linear_rmse(&self) -> f64 {
        self.report.rmse.get("linear").copied().unwrap_or(f64::NAN)
    }

    pub fn linear_re(&self) -> f64 {
        self.report.re.get("linear").copied().unwrap_or(f64::NAN)
    }
}

/// Stacks samples into one batch tensor and a `B*n x 6` target matrix.
pub fn collate<T: Scalar>(samples: &[&VelocitySample]) -> Result<(crate::encoding::SpikeTensor, Tensor<T>)> {
    let tensors: Vec<_> = samples.iter().map(|s| s.spikes.clone()).collect();
    let spikes = batch_samples(&tensors)?;
    let rows: Vec<T> = samples.iter().flat_map(|s| s.target_rows()).map(T::lit).collect();
    let n = rows.len() / VELOCITY_COLUMNS;
    Ok((spikes, Tensor::from_vec(n, VELOCITY_COLUMNS, rows)?))
}

fn split_parts(rows: &[[f64; 6]]) -> (Vec<f64>, Vec<f64>) {
    let lin = rows.iter().flat_map(|r| r[..3].to_vec()).collect();
    let ang = rows.iter().flat_map(|r| r[3..].to_vec()).collect();
    (lin, ang)
}

fn report_from(pred: &[[f64; 6]], gt: &[[f64; 6]]) -> Result<MetricReport> {
    let (pl, pa) = split_parts(pred);
    let (gl, ga) = split_parts(gt);
    let mut report = MetricReport::default();
    report.add("linear", &pl, &gl, 3)?;
    report.add("angular", &pa, &ga, 3)?;
    Ok(report)
}

/// Metrics of the model over `samples`, in evaluation mode.
pub fn evaluate_velocity<T: Scalar>(
    model: &NeuroVe<T>,
    samples: &[VelocitySample],
    batch: usize,
) -> Result<VelocityEval> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let refs: Vec<&VelocitySample> = samples.iter().collect();
    let mut predictions = Vec::with_capacity(samples.len());
    let mut firing: Vec<LayerTelemetry> = Vec::new();
    for group in refs.chunks(batch.max(1)) {
        let (spikes, _) = collate::<T>(group)?;
        let (recs, tele) = model.predict(&spikes)?;
        predictions.extend(recs);
        if firing.is_empty() {
            firing = tele
                .iter()
                .map(|t| LayerTelemetry {
                    firing_rate: 0.0,
                    ..t.clone()
                })
                .collect();
        }
        for (acc, t) in firing.iter_mut().zip(&tele) {
            acc.firing_rate += t.firing_rate * group.len() as f64 / samples.len() as f64;
        }
    }
    let pred: Vec<[f64; 6]> = predictions.iter().flatten().map(|r| r.as_row()).collect();
    let gt: Vec<[f64; 6]> = samples
        .iter()
        .flat_map(|s| s.targets.iter().map(|r| r.as_row()))
        .collect();
    Ok(VelocityEval {
        report: report_from(&pred, &gt)?,
        firing,
        predictions,
    })
}

/// Metrics of always predicting the per-column mean of `train`.
pub fn mean_baseline(train: &[VelocitySample], val: &[VelocitySample]) -> Result<MetricReport> {
    let rows: Vec<[f64; 6]> = train
        .iter()
        .flat_map(|s| s.targets.iter().map(|r| r.as_row()))
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut mean = [0.0; 6];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows.len() as f64;
        }
    }
    let gt: Vec<[f64; 6]> = val.iter().flat_map(|s| s.targets.iter().map(|r| r.as_row())).collect();
    let pred = vec![mean; gt.len()];
    report_from(&pred, &gt)
}

pub struct VelocityTrainer<T> {
    pub cfg: VelocityTrainConfig,
    pub adam: Adam<T>,
    pub scales: LossScaleState<T>,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> VelocityTrainer<T> {
    pub fn new(cfg: VelocityTrainConfig) -> Result<Self> {
        if cfg.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(cfg.scale_decay >= 0.0 && cfg.scale_decay < 1.0) {
            return Err(Error::Config("scale_decay must lie in [0, 1)".into()));
        }
        let adam = Adam::new(AdamConfig {
            lr: T::lit(cfg.lr),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            epsilon: T::lit(cfg.epsilon),
            clip_norm: (cfg.clip_norm > 0.0).then(|| T::lit(cfg.clip_norm)),
        })?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7E10_C17E);
        Ok(Self {
            scales: LossScaleState::new(T::lit(cfg.scale_decay)),
            cfg,
            adam,
            epoch: 0,
            rng,
        })
    }

    /// Shuffle state for checkpointing: the epoch counter fully determines
    /// it, so restoring replays the shuffles.
    pub fn restore_position(&mut self, epoch: usize, train_len: usize) {
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7E10_C17E);
        let mut order: Vec<usize> = (0..train_len).collect();
        for _ in 0..epoch {
            order.shuffle(&mut self.rng);
        }
        self.epoch = epoch;
    }

    pub fn train_epoch(&mut self, model: &mut NeuroVe<T>, train: &[VelocitySample]) -> Result<VelocityEpoch> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let lr = cosine_lr(
            self.cfg.lr,
            self.cfg.lr_floor,
            self.cfg.cosine,
            self.cfg.epochs,
            self.epoch,
        );
        self.adam.cfg.lr = T::lit(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum_total, mut sum_a, mut sum_l, mut steps, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut firing: Vec<LayerTelemetry> = Vec::new();
        // a separate stream per epoch, so resuming needs no replay
        let mut aug_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xA06_3E47);
        aug_rng.set_stream(self.epoch as u64);
        for group in order.chunks(self.cfg.batch) {
            let augmented: Vec<VelocitySample> = if self.cfg.augment {
                group
                    .iter()
                    .map(|&i| {
                        let bits: u8 = aug_rng.gen_range(0..8);
                        train[i].augmented(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let refs: Vec<&VelocitySample> = if self.cfg.augment {
                augmented.iter().collect()
            } else {
                group.iter().map(|&i| &train[i]).collect()
            };
            let (spikes, target) = collate::<T>(&refs)?;
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &spikes, Mode::Train)?;
            let rows = target.rows();
            let out = tape.reshape(pass.output, rows, VELOCITY_COLUMNS)?;
            let (la, ll) = velocity_loss_parts(&mut tape, out, &target)?;
            let (va, vl) = (tape.value(la).get(0, 0), tape.value(ll).get(0, 0));
            let mut parts = tape.backward_parts(&[la, ll])?.into_iter();
            let (ga, gl) = (parts.next().expect("two roots"), parts.next().expect("two roots"));
            if !self.cfg.fixed_scales {
                self.scales = update_loss_scales(&self.scales, ga.global_norm(), gl.global_norm())?;
            }
            let total = self.scales.scale_a * va + self.scales.scale_l * vl;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    loss: total.as_f64(),
                });
            }
            let grads = Gradients::combine(&[(self.scales.scale_a, ga), (self.scales.scale_l, gl)]);
            if self.adam.step(&mut model.store, &grads)? == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            model.update_running_stats(&pass.batch_stats);
            sum_total += total.as_f64();
            sum_a += va.as_f64();
            sum_l += vl.as_f64();
            steps += 1;
            if firing.is_empty() {
                firing = pass
                    .telemetry
                    .iter()
                    .map(|t| LayerTelemetry {
                        firing_rate: 0.0,
                        ..t.clone()
                    })
                    .collect();
            }
            for (acc, t) in firing.iter_mut().zip(&pass.telemetry) {
                acc.firing_rate += t.firing_rate;
            }
        }
        for f in &mut firing {
            f.firing_rate /= steps as f64;
        }
        let n = steps.max(1) as f64;
        let epoch = VelocityEpoch {
            epoch: self.epoch,
            lr,
            train_loss: sum_total / n,
            train_angular: sum_a / n,
            train_linear: sum_l / n,
            scale_a: self.scales.scale_a.as_f64(),
            scale_l: self.scales.scale_l.as_f64(),
            skipped_steps: skipped,
            firing,
        };
        self.epoch += 1;
        Ok(epoch)
    }
}

/// Convenience: predictions for every sample as records.
pub fn predict_records<T: Scalar>(model: &NeuroVe<T>, samples: &[VelocitySample]) -> Result<Vec<Vec<VelocityRecord>>> {
    let mut out = Vec::new();
    for s in samples {
        let (recs, _) = model.predict(&s.spikes)?;
        out.extend(recs);
    }
    Ok(out)
}
