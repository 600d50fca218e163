//! Complete runs: data preparation, training with logging and checkpoints,
//! evaluation reports and neuron analysis. The command-line tool is a thin
//! layer over these functions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunConfig, SeedStream};
use crate::datasets::velocity::{generate_clips, write_velocity_dataset, VelocityData, VelocitySample};
use crate::datasets::{gen_sine_dataset, SineDataset, VelocityRecord};
use crate::encoding::{encode_events, io::read_events, io::EventFormat, Event};
use crate::error::{Error, Result};
use crate::metrics::{firing_profile, FiringProfile, MetricReport};
use crate::network::{CellKind, Forecaster, ForecasterConfig, LayerTelemetry, NeuroVe, NeuroVeConfig};
use crate::neuron::{NeuronKind, NeuronParams};
use crate::scalar::Scalar;
use crate::training::checkpoint::{Checkpoint, CheckpointMeta};
use crate::training::loss::LossScaleState;
use crate::training::params::ParamStore;
use crate::training::sine::{evaluate_sine, SineEpoch, SineEval, SineTrainer};
use crate::training::velocity::{evaluate_velocity, mean_baseline, VelocityEpoch, VelocityEval, VelocityTrainer};

pub const RECEIPT_FILE: &str = "config.resolved.toml";
pub const EPOCH_LOG: &str = "epochs.ndjson";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";

pub const TASK_SINE: &str = "sine";
pub const TASK_VELOCITY: &str = "velocity";

/// Precision of the velocity network in complete runs.
pub type VelocityScalar = f32;

/// Writes `contents` to `path` through a temporary sibling and a rename,
/// so readers never observe a half-written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Creates `out` and writes the resolved configuration into it. Runs call
/// this before any computation.
pub fn write_receipt(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(RECEIPT_FILE);
    write_atomic(&path, cfg.to_resolved_toml()?.as_bytes())?;
    Ok(path)
}

/// Appends one JSON document per line, flushing after every record so the
/// log survives an interrupted run.
pub struct EpochLog {
    file: BufWriter<File>,
}

impl EpochLog {
    /// Opens the log for a run that has completed `resume_epoch` epochs.
    /// Earlier entries are kept, later ones (from an abandoned tail) dropped.
    pub fn open(path: &Path, resume_epoch: usize) -> Result<Self> {
        let mut kept = Vec::new();
        if resume_epoch > 0 && path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                let v: serde_json::Value = serde_json::from_str(&line)?;
                if v.get("epoch")
                    .and_then(|e| e.as_u64())
                    .is_some_and(|e| (e as usize) < resume_epoch)
                {
                    kept.push(line);
                }
            }
        }
        let mut file = BufWriter::new(File::create(path)?);
        for line in kept {
            writeln!(file, "{line}")?;
        }
        file.flush()?;
        Ok(Self { file })
    }

    pub fn append<S: Serialize>(&mut self, record: &S) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

/// The sine dataset of a run: read from `dir` when given, otherwise
/// generated from the configuration.
pub fn sine_dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<SineDataset> {
    match dir {
        Some(d) => SineDataset::read_csv(d, &cfg.sine.data),
        None => gen_sine_dataset(&cfg.sine.data, cfg.seed_for(SeedStream::SineData)),
    }
}

pub fn gen_sine_data(cfg: &RunConfig, out: &Path) -> Result<SineDataset> {
    let ds = gen_sine_dataset(&cfg.sine.data, cfg.seed_for(SeedStream::SineData))?;
    ds.write_csv(out)?;
    Ok(ds)
}

pub fn gen_velocity_data(cfg: &RunConfig, out: &Path) -> Result<VelocityData> {
    let spec = &cfg.velocity.data;
    let clips = generate_clips(spec, cfg.seed_for(SeedStream::VelocityData))?;
    write_velocity_dataset(spec, &clips, out)?;
    VelocityData::from_generated(spec, &clips)
}

/// The velocity dataset of a run: loaded from a manifest directory when
/// given, otherwise simulated in memory.
pub fn velocity_dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<VelocityData> {
    let data = match dir {
        Some(d) => VelocityData::load(d)?,
        None => {
            let spec = &cfg.velocity.data;
            let clips = generate_clips(spec, cfg.seed_for(SeedStream::VelocityData))?;
            VelocityData::from_generated(spec, &clips)?
        }
    };
    if let Some(w) = &data.window {
        if w != &cfg.velocity.data.window {
            return Err(Error::Config(format!(
                "dataset window {w:?} differs from the configured window {:?}",
                cfg.velocity.data.window
            )));
        }
    }
    Ok(data)
}

fn recent_losses(history: &[f64]) -> Vec<f64> {
    history[history.len().saturating_sub(5)..].to_vec()
}

fn with_history(e: Error, history: &[f64]) -> Error {
    match e {
        Error::Diverged { epoch, loss } => Error::DivergedRun {
            epoch,
            loss,
            recent: recent_losses(history),
        },
        other => other,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::INFINITY;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if m.is_finite() {
        m
    } else {
        f64::INFINITY
    }
}

/// Model-selection score of a sine validation pass (lower is better).
pub fn sine_score(eval: &SineEval) -> f64 {
    mean(&eval.fit_rmse) + mean(&eval.forecast_rmse)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SineTrainerState {
    best_score: f64,
    best_epoch: Option<usize>,
    history: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SineReport {
    pub task: &'static str,
    pub cell: CellKind,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    /// Metrics of the retained (best) model on the validation split.
    pub val: SineEval,
    pub fit_rmse_dagger: Vec<f64>,
    /// Mean spikes per neuron per step of every layer on the validation fit segment.
    pub firing_rates: Vec<f64>,
}

pub struct SineRun {
    pub epochs: Vec<SineEpoch>,
    pub report: SineReport,
    pub model: Forecaster<f64>,
}

fn sine_meta(cfg: &RunConfig, epoch: usize, state: &SineTrainerState) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        task: TASK_SINE.into(),
        model: serde_json::to_value(&cfg.sine.model)?,
        train: serde_json::to_value(&cfg.sine.train)?,
        epoch,
        state: serde_json::to_value(state)?,
    })
}

fn expect_task(ckpt: &Checkpoint, task: &str, path: &Path) -> Result<()> {
    if ckpt.meta.task != task {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("holds a `{}` model, expected `{task}`", ckpt.meta.task),
        });
    }
    Ok(())
}

/// Trains the sine forecaster, writing the epoch log, the last and best
/// checkpoints and a final report into `out`.
pub fn train_sine(cfg: &RunConfig, data: &SineDataset, out: &Path, resume: Option<&Path>) -> Result<SineRun> {
    std::fs::create_dir_all(out)?;
    let mut model = Forecaster::<f64>::new(cfg.sine.model.clone(), cfg.seed_for(SeedStream::SineModel))?;
    let mut train_cfg = cfg.sine.train.clone();
    train_cfg.seed = cfg.seed_for(SeedStream::SineTrain);
    let mut trainer = SineTrainer::<f64>::new(train_cfg)?;
    let mut state = SineTrainerState {
        best_score: f64::INFINITY,
        best_epoch: None,
        history: Vec::new(),
    };
    let mut best_store: Option<ParamStore<f64>> = None;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        expect_task(&ckpt, TASK_SINE, path)?;
        ckpt.check_model(&cfg.sine.model)?;
        ckpt.apply(&mut model.store)?;
        ckpt.restore_adam(&mut trainer.adam);
        trainer.epoch = ckpt.meta.epoch;
        state = serde_json::from_value(ckpt.meta.state.clone())
            .map_err(|e| Error::Config(format!("checkpoint trainer state: {e}")))?;
        let best_path = path.with_file_name(BEST_CHECKPOINT);
        if state.best_epoch.is_some() && best_path.exists() {
            let mut store = model.store.clone();
            Checkpoint::load(&best_path)?.apply(&mut store)?;
            best_store = Some(store);
        }
    }
    let mut log = EpochLog::open(&out.join(EPOCH_LOG), trainer.epoch)?;
    let mut epochs = Vec::new();
    let warmup = cfg.sine.train.warmup;
    let mut stale = 0usize;
    while trainer.epoch < cfg.sine.train.epochs {
        let lr = trainer.current_lr();
        let (loss, skipped) = trainer
            .train_epoch(&mut model, data)
            .map_err(|e| with_history(e, &state.history))?;
        state.history.push(loss);
        let eval = evaluate_sine(&model, data, &data.val, warmup)?;
        let record = SineEpoch {
            epoch: trainer.epoch - 1,
            lr,
            train_loss: loss,
            val_fit_rmse: eval.fit_rmse.clone(),
            val_forecast_rmse: eval.forecast_rmse.clone(),
            skipped_steps: skipped,
        };
        log.append(&record)?;
        epochs.push(record);
        let score = sine_score(&eval);
        if score < state.best_score {
            state.best_score = score;
            state.best_epoch = Some(trainer.epoch - 1);
            best_store = Some(model.store.clone());
            Checkpoint::capture(sine_meta(cfg, trainer.epoch, &state)?, &model.store, None)
                .save(&out.join(BEST_CHECKPOINT))?;
            stale = 0;
        } else {
            stale += 1;
        }
        Checkpoint::capture(
            sine_meta(cfg, trainer.epoch, &state)?,
            &model.store,
            Some(&trainer.adam),
        )
        .save(&out.join(LAST_CHECKPOINT))?;
        if cfg.sine.train.patience > 0 && stale >= cfg.sine.train.patience {
            break;
        }
    }
    if let Some(store) = best_store {
        model.store = store;
    }
    let val = evaluate_sine(&model, data, &data.val, warmup)?;
    let seqs: Vec<&[f64]> = data.val.iter().map(|&i| data.sequences[i].values.as_slice()).collect();
    let firing_rates = model.firing_rates(&seqs, data.spec.steps)?;
    let report = SineReport {
        task: TASK_SINE,
        cell: cfg.sine.model.cell,
        epochs_run: trainer.epoch,
        best_epoch: state.best_epoch,
        best_score: state.best_score,
        fit_rmse_dagger: val.fit_rmse.iter().map(|r| r * 1000.0).collect(),
        val,
        firing_rates,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(SineRun { epochs, report, model })
}

/// Restores a forecaster from a checkpoint written by [`train_sine`].
pub fn load_sine_model(path: &Path) -> Result<Forecaster<f64>> {
    let ckpt = Checkpoint::load(path)?;
    expect_task(&ckpt, TASK_SINE, path)?;
    let cfg: ForecasterConfig = serde_json::from_value(ckpt.meta.model.clone())
        .map_err(|e| Error::Config(format!("checkpoint model configuration: {e}")))?;
    let mut model = Forecaster::new(cfg, 0)?;
    ckpt.apply(&mut model.store)?;
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Val,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train or val)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SineEvalReport {
    pub task: &'static str,
    pub split: SplitChoice,
    pub sequences: Vec<usize>,
    pub fit: MetricReport,
    pub forecast: MetricReport,
    pub per_sequence_fit_rmse: Vec<f64>,
    pub per_sequence_forecast_rmse: Vec<f64>,
}

/// Evaluates a sine checkpoint, writing `metrics.json` and one
/// `sine_curve_<sequence>.csv` (`step,gt,pred,phase`) per sequence.
pub fn eval_sine(
    model: &Forecaster<f64>,
    data: &SineDataset,
    split: SplitChoice,
    warmup: usize,
    out: &Path,
) -> Result<SineEvalReport> {
    std::fs::create_dir_all(out)?;
    let indices = match split {
        SplitChoice::Train => &data.train,
        SplitChoice::Val => &data.val,
    };
    let eval = evaluate_sine(model, data, indices, warmup)?;
    let (steps, fc_steps) = (data.spec.steps, data.spec.forecast_steps);
    let (mut fit_p, mut fit_g, mut fc_p, mut fc_g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (&idx, (fit, fc)) in indices.iter().zip(&eval.predictions) {
        let gt = &data.sequences[idx].values;
        let start = warmup.min(fit.len().saturating_sub(1));
        fit_p.extend_from_slice(&fit[start..]);
        fit_g.extend_from_slice(&gt[start + 1..fit.len() + 1]);
        fc_p.extend_from_slice(fc);
        fc_g.extend_from_slice(&gt[steps..steps + fc.len()]);
        let mut csv = String::from("step,gt,pred,phase\n");
        for (k, &g) in gt.iter().enumerate().take(steps + fc_steps) {
            let (pred, phase) = if k == 0 {
                (None, "fit")
            } else if k < steps {
                (fit.get(k - 1).copied(), "fit")
            } else {
                (fc.get(k - steps).copied(), "forecast")
            };
            let pred = pred.map(|p| format!("{p:e}")).unwrap_or_default();
            csv.push_str(&format!("{k},{g:e},{pred},{phase}\n"));
        }
        write_atomic(&out.join(format!("sine_curve_{idx:03}.csv")), csv.as_bytes())?;
    }
    let mut fit = MetricReport::default();
    fit.add("value", &fit_p, &fit_g, 1)?;
    let mut forecast = MetricReport::default();
    if !fc_p.is_empty() {
        forecast.add("value", &fc_p, &fc_g, 1)?;
    }
    let report = SineEvalReport {
        task: TASK_SINE,
        split,
        sequences: indices.clone(),
        fit,
        forecast,
        per_sequence_fit_rmse: eval.fit_rmse,
        per_sequence_forecast_rmse: eval.forecast_rmse,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Predicts the continuation of one observed series: the model reads
/// `observed` teacher-forced, then runs closed-loop for `horizon` steps.
/// Returns `(step, prediction, phase)` rows where `step` indexes the
/// predicted value.
pub fn predict_sine(
    model: &Forecaster<f64>,
    observed: &[f64],
    horizon: usize,
) -> Result<Vec<(usize, f64, &'static str)>> {
    if observed.is_empty() {
        return Err(Error::Empty("observed series"));
    }
    let preds = model.predict_sequences(&[observed], observed.len(), horizon)?;
    let (fit, fc) = &preds[0];
    let mut rows: Vec<(usize, f64, &'static str)> = fit.iter().enumerate().map(|(i, &p)| (i + 1, p, "fit")).collect();
    rows.extend(fc.iter().enumerate().map(|(i, &p)| (observed.len() + i, p, "forecast")));
    Ok(rows)
}

/// Reads the `value` column of a `step,value` CSV (or a bare one-column file).
pub fn read_series_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or(line).trim();
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if ln == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VelocityTrainerState {
    best_score: f64,
    best_epoch: Option<usize>,
    history: Vec<f64>,
    scales: LossScaleState<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityEpochRecord {
    #[serde(flatten)]
    pub train: VelocityEpoch,
    pub val_linear_rmse: f64,
    pub val_linear_re: f64,
    pub val_angular_rmse: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VelocityReport {
    pub task: &'static str,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_score: f64,
    pub val: VelocityEval,
    /// Predicting the per-column training mean for every target.
    pub mean_baseline: MetricReport,
    /// `1 - model / baseline` of the linear RMSE.
    pub linear_improvement: f64,
    pub output_shape: [usize; 3],
    pub parameters: usize,
}

pub struct VelocityRun<T> {
    pub epochs: Vec<VelocityEpochRecord>,
    pub report: VelocityReport,
    pub model: NeuroVe<T>,
}

/// Model-selection score: the linear and angular RMSE, each normalised by
/// the mean baseline, summed.
pub fn velocity_score(eval: &VelocityEval, baseline: &MetricReport) -> f64 {
    let part = |k: &str| {
        let m = eval.report.rmse.get(k).copied().unwrap_or(f64::INFINITY);
        let b = baseline.rmse.get(k).copied().unwrap_or(1.0).max(1e-12);
        m / b
    };
    let s = part("linear") + part("angular");
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

fn velocity_meta(
    cfg: &RunConfig,
    net: &NeuroVeConfig,
    epoch: usize,
    state: &VelocityTrainerState,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        task: TASK_VELOCITY.into(),
        model: serde_json::to_value(net)?,
        train: serde_json::to_value(&cfg.velocity.train)?,
        epoch,
        state: serde_json::to_value(state)?,
    })
}

pub fn train_velocity<T: Scalar>(
    cfg: &RunConfig,
    data: &VelocityData,
    out: &Path,
    resume: Option<&Path>,
) -> Result<VelocityRun<T>> {
    std::fs::create_dir_all(out)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Empty("velocity train or validation split"));
    }
    let net = cfg.velocity.network();
    let mut model = NeuroVe::<T>::build(net.clone(), cfg.seed_for(SeedStream::VelocityModel))?;
    let mut train_cfg = cfg.velocity.train.clone();
    train_cfg.seed = cfg.seed_for(SeedStream::VelocityTrain);
    let mut trainer = VelocityTrainer::<T>::new(train_cfg)?;
    let baseline = mean_baseline(&data.train, &data.val)?;
    let mut state = VelocityTrainerState {
        best_score: f64::INFINITY,
        best_epoch: None,
        history: Vec::new(),
        scales: cast_scales(&trainer.scales),
    };
    let mut best_store: Option<ParamStore<T>> = None;
    if let Some(path) = resume {
        let ckpt = Checkpoint::load(path)?;
        expect_task(&ckpt, TASK_VELOCITY, path)?;
        ckpt.check_model(&net)?;
        ckpt.apply(&mut model.store)?;
        ckpt.restore_adam(&mut trainer.adam);
        state = serde_json::from_value(ckpt.meta.state.clone())
            .map_err(|e| Error::Config(format!("checkpoint trainer state: {e}")))?;
        trainer.scales = uncast_scales(&state.scales);
        trainer.restore_position(ckpt.meta.epoch, data.train.len());
        let best_path = path.with_file_name(BEST_CHECKPOINT);
        if state.best_epoch.is_some() && best_path.exists() {
            let mut store = model.store.clone();
            Checkpoint::load(&best_path)?.apply(&mut store)?;
            best_store = Some(store);
        }
    }
    let mut log = EpochLog::open(&out.join(EPOCH_LOG), trainer.epoch)?;
    let mut epochs = Vec::new();
    let mut stale = 0usize;
    let batch = cfg.velocity.eval_batch;
    while trainer.epoch < cfg.velocity.train.epochs {
        let ep = trainer
            .train_epoch(&mut model, &data.train)
            .map_err(|e| with_history(e, &state.history))?;
        state.history.push(ep.train_loss);
        state.scales = cast_scales(&trainer.scales);
        let eval = evaluate_velocity(&model, &data.val, batch)?;
        let score = velocity_score(&eval, &baseline);
        let record = VelocityEpochRecord {
            train: ep,
            val_linear_rmse: eval.linear_rmse(),
            val_linear_re: eval.linear_re(),
            val_angular_rmse: eval.report.rmse.get("angular").copied().unwrap_or(f64::NAN),
            score,
        };
        log.append(&record)?;
        epochs.push(record);
        if score < state.best_score {
            state.best_score = score;
            state.best_epoch = Some(trainer.epoch - 1);
            best_store = Some(model.store.clone());
            Checkpoint::capture(velocity_meta(cfg, &net, trainer.epoch, &state)?, &model.store, None)
                .save(&out.join(BEST_CHECKPOINT))?;
            stale = 0;
        } else {
            stale += 1;
        }
        Checkpoint::capture(
            velocity_meta(cfg, &net, trainer.epoch, &state)?,
            &model.store,
            Some(&trainer.adam),
        )
        .save(&out.join(LAST_CHECKPOINT))?;
        if cfg.velocity.train.patience > 0 && stale >= cfg.velocity.train.patience {
            break;
        }
    }
    if let Some(store) = best_store {
        model.store = store;
    }
    let val = evaluate_velocity(&model, &data.val, batch)?;
    let base_lin = baseline.rmse.get("linear").copied().unwrap_or(f64::NAN);
    let report = VelocityReport {
        task: TASK_VELOCITY,
        epochs_run: trainer.epoch,
        best_epoch: state.best_epoch,
        best_score: state.best_score,
        linear_improvement: 1.0 - val.linear_rmse() / base_lin,
        output_shape: [
            data.val.len(),
            net.window.n_bins,
            crate::network::neurove::VELOCITY_COLUMNS,
        ],
        parameters: model.parameter_count(),
        mean_baseline: baseline,
        val,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(VelocityRun { epochs, report, model })
}

fn cast_scales<T: Scalar>(s: &LossScaleState<T>) -> LossScaleState<f64> {
    LossScaleState {
        ema_angular: s.ema_angular.as_f64(),
        ema_linear: s.ema_linear.as_f64(),
        decay: s.decay.as_f64(),
        scale_a: s.scale_a.as_f64(),
        scale_l: s.scale_l.as_f64(),
    }
}

fn uncast_scales<T: Scalar>(s: &LossScaleState<f64>) -> LossScaleState<T> {
    LossScaleState {
        ema_angular: T::lit(s.ema_angular),
        ema_linear: T::lit(s.ema_linear),
        decay: T::lit(s.decay),
        scale_a: T::lit(s.scale_a),
        scale_l: T::lit(s.scale_l),
    }
}

pub fn load_velocity_model<T: Scalar>(path: &Path) -> Result<NeuroVe<T>> {
    let ckpt = Checkpoint::load(path)?;
    expect_task(&ckpt, TASK_VELOCITY, path)?;
    let cfg: NeuroVeConfig = serde_json::from_value(ckpt.meta.model.clone())
        .map_err(|e| Error::Config(format!("checkpoint model configuration: {e}")))?;
    let mut model = NeuroVe::build(cfg, 0)?;
    ckpt.apply(&mut model.store)?;
    Ok(model)
}

/// Task recorded in a checkpoint.
pub fn checkpoint_task(path: &Path) -> Result<String> {
    Ok(Checkpoint::load(path)?.meta.task)
}

#[derive(Clone, Debug, Serialize)]
pub struct VelocityEvalReport {
    pub task: &'static str,
    pub split: SplitChoice,
    pub clips: usize,
    pub metrics: MetricReport,
    pub firing: Vec<LayerTelemetry>,
}

/// Evaluates a velocity checkpoint, writing `metrics.json` and
/// `velocity_predictions.csv` with one row per clip and bin.
pub fn eval_velocity<T: Scalar>(
    model: &NeuroVe<T>,
    samples: &[VelocitySample],
    split: SplitChoice,
    batch: usize,
    out: &Path,
) -> Result<VelocityEvalReport> {
    std::fs::create_dir_all(out)?;
    let w = &model.cfg.window;
    let expected = [w.t_steps, 1, w.channels(), w.sensor_h, w.sensor_w];
    if let Some(s) = samples.iter().find(|s| s.spikes.shape() != expected) {
        return Err(Error::Config(format!(
            "clip `{}` has spike shape {:?}, the checkpoint expects {:?}",
            s.name,
            s.spikes.shape(),
            expected
        )));
    }
    let eval = evaluate_velocity(model, samples, batch)?;
    let mut csv = String::from(
        "clip,bin,t_s,gt_vx,gt_vy,gt_vz,gt_wx,gt_wy,gt_wz,pred_vx,pred_vy,pred_vz,pred_wx,pred_wy,pred_wz\n",
    );
    for (s, preds) in samples.iter().zip(&eval.predictions) {
        for (gt, p) in s.targets.iter().zip(preds) {
            csv.push_str(&format!("{},{},{:e}", s.name, gt.bin_index, gt.t));
            for v in gt.as_row().iter().chain(p.as_row().iter()) {
                csv.push_str(&format!(",{v:e}"));
            }
            csv.push('\n');
        }
    }
    write_atomic(&out.join("velocity_predictions.csv"), csv.as_bytes())?;
    let report = VelocityEvalReport {
        task: TASK_VELOCITY,
        split,
        clips: samples.len(),
        metrics: eval.report,
        firing: eval.firing,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Cuts a sorted event stream into consecutive samples of the model's
/// span, starting at the first event, and predicts each one. Records carry
/// absolute times in seconds.
pub fn predict_velocity_stream<T: Scalar>(
    model: &NeuroVe<T>,
    events: &[Event],
) -> Result<Vec<(usize, VelocityRecord)>> {
    let window = &model.cfg.window;
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    let last = events.last().expect("non-empty").t;
    let span = window.span_us();
    let times = crate::datasets::velocity::target_times(window);
    let mut out = Vec::new();
    let mut start = first.t;
    let mut sample = 0;
    while start <= last {
        let lo = events.partition_point(|e| e.t < start);
        let hi = events.partition_point(|e| e.t < start + span);
        let (spikes, _) = encode_events(&events[lo..hi], window, Some(start))?;
        let (recs, _) = model.predict(&spikes)?;
        for (b, mut r) in recs.into_iter().next().unwrap_or_default().into_iter().enumerate() {
            r.t = start as f64 * 1e-6 + times[b];
            r.bin_index = b;
            out.push((sample, r));
        }
        sample += 1;
        start += span;
    }
    Ok(out)
}

pub fn read_event_file(path: &Path, format: Option<EventFormat>) -> Result<Vec<Event>> {
    read_events(path, format.unwrap_or_else(|| EventFormat::from_path(path)))
}

#[derive(Clone, Debug, Serialize)]
pub struct NeuronAnalysis {
    pub seed: u64,
    pub steps: usize,
    pub neurons: usize,
    pub lif_rate: f64,
    pub alif_rate: f64,
    pub lif: FiringProfile,
    pub alif: FiringProfile,
}

/// Seeded uniform random current, `steps x neurons`.
pub fn random_current(seed: u64, steps: usize, neurons: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| (0..neurons).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

/// Drives LIF and ALIF populations with one shared random current.
pub fn analyze_neurons(cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, NeuronAnalysis)> {
    let a = &cfg.analyze;
    let seed = cfg.seed_for(SeedStream::Analyze);
    let trace = random_current(seed, a.steps, a.neurons, a.current_min, a.current_max);
    let params = NeuronParams::new(a.alpha, a.v_th, a.diffusion_d);
    let lif = firing_profile(NeuronKind::Lif, &params, &trace)?;
    let alif = firing_profile(NeuronKind::Alif, &params, &trace)?;
    Ok((
        trace,
        NeuronAnalysis {
            seed,
            steps: a.steps,
            neurons: a.neurons,
            lif_rate: lif.mean_rate,
            alif_rate: alif.mean_rate,
            lif,
            alif,
        },
    ))
}

/// Writes `input.csv` (`step,neuron_id,current`), `lif.csv` and `alif.csv`
/// (`step,neuron_id,spike`) and `firing_summary.json`.
pub fn write_neuron_analysis(trace: &[Vec<f64>], analysis: &NeuronAnalysis, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut input = String::from("step,neuron_id,current\n");
    for (t, row) in trace.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            input.push_str(&format!("{t},{j},{v:e}\n"));
        }
    }
    write_atomic(&out.join("input.csv"), input.as_bytes())?;
    for (name, profile) in [("lif", &analysis.lif), ("alif", &analysis.alif)] {
        let mut csv = String::from("step,neuron_id,spike\n");
        for (t, row) in profile.raster.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                csv.push_str(&format!("{t},{j},{s}\n"));
            }
        }
        write_atomic(&out.join(format!("{name}.csv")), csv.as_bytes())?;
    }
    write_json(
        &out.join("firing_summary.json"),
        &json!({
            "seed": analysis.seed,
            "steps": analysis.steps,
            "neurons": analysis.neurons,
            "lif_rate": analysis.lif_rate,
            "alif_rate": analysis.alif_rate,
            "alif_rate_ge_lif_rate": analysis.alif_rate >= analysis.lif_rate,
            "lif": analysis.lif,
            "alif": analysis.alif,
        }),
    )
}
