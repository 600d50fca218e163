//! Event-camera velocity model: a spiking convolutional feature extractor
//! feeding a gated spiking recurrent estimator.
//!
//! Shapes: spikes `[T, B, 2n, H, W]` become per-step features `[B, F]`
//! (the flattened spikes of the last block); the estimator reads its
//! output neuron at the final step and an affine head produces `n * 6`
//! values per sample, i.e. `[B, n, 6]` stored as `B x 6n`.
//!
//! Every layer completes all `T` steps before the next layer starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forecaster::CellKind;
use crate::datasets::VelocityRecord;
use crate::encoding::{SpikeTensor, WindowSpec};
use crate::error::{Error, Result};
use crate::neuron::{heaviside, SurrogateSpec};
use crate::recurrent::{AslstmLayer, CellConfig, LayerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::params::ParamStore;
use crate::training::tape::{conv_out, BatchStats, ConvGeometry, ParamId, Tape, Var};

pub const VELOCITY_COLUMNS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    pub blocks: Vec<BlockConfig>,
    pub bn_epsilon: f64,
    /// Weight of the newest batch in the running statistics.
    pub bn_momentum: f64,
    pub alpha: f64,
    pub v_th: f64,
    pub surrogate: SurrogateSpec<f64>,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            blocks: [16, 32, 64, 128]
                .into_iter()
                .map(|c| BlockConfig {
                    out_channels: c,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                })
                .collect(),
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            alpha: 0.9,
            v_th: 1.0,
            surrogate: SurrogateSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub alpha: f64,
    pub v_th: f64,
    pub diffusion_d: f64,
    pub kappa: f64,
    pub gate_bias: bool,
    pub surrogate: SurrogateSpec<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Aslstm,
            layers: 1,
            hidden: 64,
            alpha: 0.9,
            v_th: 1.0,
            diffusion_d: 0.5,
            kappa: 0.5,
            gate_bias: true,
            surrogate: SurrogateSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct NeuroVeConfig {
    pub window: WindowSpec,
    pub extractor: FeatureExtractorConfig,
    pub estimator: EstimatorConfig,
}

impl NeuroVeConfig {
    /// Geometry of every block for the configured sensor.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        self.window.validate()?;
        if self.extractor.blocks.is_empty() {
            return Err(Error::Config("the feature extractor needs at least one block".into()));
        }
        let (mut c, mut h, mut w) = (self.window.channels(), self.window.sensor_h, self.window.sensor_w);
        let mut out = Vec::new();
        for (i, b) in self.extractor.blocks.iter().enumerate() {
            if b.kernel == 0 || b.stride == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!(
                    "block {i}: kernel, stride and channels must be >= 1"
                )));
            }
            let (oh, ow) = (
                conv_out(h, b.kernel, b.stride, b.padding),
                conv_out(w, b.kernel, b.stride, b.padding),
            );
            if oh == 0 || ow == 0 {
                return Err(Error::Config(format!(
                    "block {i}: {}x{} kernel (padding {}) does not fit a {h}x{w} feature map",
                    b.kernel, b.kernel, b.padding
                )));
            }
            out.push(ConvGeometry {
                in_channels: c,
                in_h: h,
                in_w: w,
                out_channels: b.out_channels,
                kernel: b.kernel,
                stride: b.stride,
                padding: b.padding,
            });
            (c, h, w) = (b.out_channels, oh, ow);
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.geometries()?.last().expect("non-empty").out_len())
    }

    pub fn output_dim(&self) -> usize {
        self.window.n_bins * VELOCITY_COLUMNS
    }

    pub fn validate(&self) -> Result<()> {
        self.geometries()?;
        let e = &self.extractor;
        if !(e.alpha > 0.0 && e.alpha < 1.0) || !(e.v_th > 0.0) || !(e.bn_epsilon > 0.0) {
            return Err(Error::Config(
                "extractor needs 0 < alpha < 1, v_th > 0, bn_epsilon > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&e.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        if self.estimator.layers == 0 || self.estimator.hidden == 0 {
            return Err(Error::Config(
                "estimator needs at least one layer and hidden >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> Result<usize> {
        let mut n = 0;
        for g in self.geometries()? {
            n += g.out_channels * g.patch_len() + g.out_channels + 2 * g.out_channels;
        }
        let h = self.estimator.hidden;
        let mut input = self.feature_dim()?;
        for _ in 0..self.estimator.layers {
            n += input * 5 * h + h * 4 * h + input * h;
            if self.estimator.gate_bias {
                n += 4 * h;
            }
            input = h;
        }
        n += h * self.output_dim() + self.output_dim();
        Ok(n)
    }

    fn cell_config<T: Scalar>(&self, input_dim: usize) -> CellConfig<T> {
        let e = &self.estimator;
        let cfg = CellConfig {
            input_dim,
            hidden_dim: e.hidden,
            alpha: T::lit(e.alpha),
            v_th: T::lit(e.v_th),
            diffusion_d: T::lit(e.diffusion_d),
            kappa: T::lit(e.kappa),
            recurrence: Default::default(),
            gate_bias: e.gate_bias,
            surrogate: SurrogateSpec {
                kind: e.surrogate.kind,
                width: T::lit(e.surrogate.width),
            },
        };
        match e.cell {
            CellKind::Aslstm => cfg,
            CellKind::Slstm => cfg.slstm(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractorBlock {
    pub geom: ConvGeometry,
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct NeuroVe<T> {
    pub cfg: NeuroVeConfig,
    pub blocks: Vec<ExtractorBlock>,
    pub estimator: Vec<AslstmLayer<T>>,
    head_w: ParamId,
    head_b: ParamId,
    pub store: ParamStore<T>,
}

/// Per-step spike rates of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTelemetry {
    pub name: String,
    pub firing_rate: f64,
}

pub struct ForwardPass<T> {
    /// `B x 6n`.
    pub output: Var,
    /// Per-block batch statistics (training mode only).
    pub batch_stats: Vec<BatchStats<T>>,
    pub telemetry: Vec<LayerTelemetry>,
    /// `(layer, step)` in evaluation order; extractor blocks come first,
    /// estimator layers are numbered after them.
    pub schedule: Vec<(usize, usize)>,
    /// Spikes out of every extractor block, `T*B x out_len`.
    pub block_spikes: Vec<Var>,
    /// Features entering the estimator, one `B x F` node per step.
    pub features: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation.
    Train,
    /// Running statistics.
    Eval,
}

impl<T: Scalar> NeuroVe<T> {
    /// Deterministic initialisation from `seed`.
    pub fn build(cfg: NeuroVeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        for (i, geom) in cfg.geometries()?.into_iter().enumerate() {
            let bound = (3.0 / geom.patch_len() as f64).sqrt();
            let co = geom.out_channels;
            blocks.push(ExtractorBlock {
                geom,
                w: store.add(
                    format!("block{i}.w"),
                    Tensor::uniform(co, geom.patch_len(), bound, &mut rng),
                ),
                b: store.add(format!("block{i}.b"), Tensor::zeros(1, co)),
                gamma: store.add(format!("block{i}.gamma"), Tensor::filled(1, co, T::one())),
                beta: store.add(format!("block{i}.beta"), Tensor::zeros(1, co)),
                running_mean: store.add_buffer(format!("block{i}.running_mean"), Tensor::zeros(1, co)),
                running_var: store.add_buffer(format!("block{i}.running_var"), Tensor::filled(1, co, T::one())),
            });
        }
        let mut estimator = Vec::new();
        let mut input = cfg.feature_dim()?;
        for l in 0..cfg.estimator.layers {
            estimator.push(AslstmLayer::init(
                &mut store,
                &format!("est{l}"),
                cfg.cell_config(input),
                &mut rng,
            )?);
            input = cfg.estimator.hidden;
        }
        let h = cfg.estimator.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let head_w = store.add("head.w", Tensor::uniform(h, cfg.output_dim(), bound, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, cfg.output_dim()));
        Ok(Self {
            cfg,
            blocks,
            estimator,
            head_w,
            head_b,
            store,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    fn check_input(&self, spikes: &SpikeTensor) -> Result<()> {
        let [t, _, c, h, w] = spikes.shape();
        let win = &self.cfg.window;
        if (t, c, h, w) != (win.t_steps, win.channels(), win.sensor_h, win.sensor_w) {
            return Err(Error::Shape(format!(
                "input [{t}, B, {c}, {h}, {w}] does not match model [{}, B, {}, {}, {}]",
                win.t_steps,
                win.channels(),
                win.sensor_h,
                win.sensor_w
            )));
        }
        Ok(())
    }

    /// Spiking feature extractor. Returns per-step features and, for
    /// telemetry, every block's spike output.
    pub fn feature_extract(
        &self,
        tape: &mut Tape<T>,
        spikes: &SpikeTensor,
        mode: Mode,
        pass: &mut ForwardPassLog<T>,
    ) -> Result<Vec<Var>> {
        self.check_input(spikes)?;
        let [steps, batch, ..] = spikes.shape();
        let frames: Vec<Tensor<T>> = (0..steps).map(|t| spikes.frame(t)).collect();
        let refs: Vec<&Tensor<T>> = frames.iter().collect();
        let mut x = tape.constant(Tensor::concat_rows(&refs)?);
        let e = &self.cfg.extractor;
        let (alpha, v_th) = (T::lit(e.alpha), T::lit(e.v_th));
        let surrogate = SurrogateSpec {
            kind: e.surrogate.kind,
            width: T::lit(e.surrogate.width),
        };
        for (i, blk) in self.blocks.iter().enumerate() {
            let w = tape.param(blk.w, self.store.get(blk.w));
            let b = tape.param(blk.b, self.store.get(blk.b));
            let gamma = tape.param(blk.gamma, self.store.get(blk.gamma));
            let beta = tape.param(blk.beta, self.store.get(blk.beta));
            // all steps at once: the convolution is stateless and the
            // normalisation pools time and batch
            let conv = tape.conv2d(x, w, b, blk.geom)?;
            let running = match mode {
                Mode::Train => None,
                Mode::Eval => Some((
                    self.store.get(blk.running_mean).data(),
                    self.store.get(blk.running_var).data(),
                )),
            };
            let (bn, stats) =
                tape.batch_norm(conv, gamma, beta, blk.geom.out_channels, T::lit(e.bn_epsilon), running)?;
            if mode == Mode::Train {
                pass.batch_stats.push(stats);
            }
            let out_len = blk.geom.out_len();
            let mut v: Option<Var> = None;
            let mut s_hard = Tensor::zeros(batch, out_len);
            let mut outs = Vec::with_capacity(steps);
            let mut fired = 0.0;
            for t in 0..steps {
                let current = tape.slice_rows(bn, t * batch, batch)?;
                let vt = match v {
                    None => current,
                    Some(prev) => {
                        let decayed = tape.scale(prev, alpha);
                        let mask = s_hard.map(|s| T::one() - s);
                        let kept = tape.mul_const(decayed, mask)?;
                        tape.add(kept, current)?
                    }
                };
                let s = tape.spike(vt, v_th, surrogate);
                s_hard = tape.value(vt).map(|p| heaviside(p, v_th));
                fired += s_hard.sum().as_f64();
                outs.push(s);
                v = Some(vt);
                pass.schedule.push((i, t));
            }
            pass.telemetry.push(LayerTelemetry {
                name: format!("block{i}"),
                firing_rate: fired / (steps * batch * out_len).max(1) as f64,
            });
            x = tape.concat_rows(&outs)?;
            pass.block_spikes.push(x);
        }
        let features = (0..steps)
            .map(|t| tape.slice_rows(x, t * batch, batch))
            .collect::<Result<Vec<_>>>()?;
        Ok(features)
    }

    /// Recurrent estimator over `features` (`T` nodes of `B x F`); returns
    /// the `B x 6n` head output read at the final step.
    pub fn estimate_velocity(&self, tape: &mut Tape<T>, features: &[Var], pass: &mut ForwardPassLog<T>) -> Result<Var> {
        let first = *features.first().ok_or(Error::Empty("feature sequence"))?;
        let batch = tape.value(first).rows();
        let offset = self.blocks.len();
        let mut xs = features.to_vec();
        let mut top: Option<(Var, LayerState<T>)> = None;
        for (l, layer) in self.estimator.iter().enumerate() {
            let mut st = layer.zero_state(tape, batch);
            let mut next = Vec::with_capacity(xs.len());
            let mut fired = 0.0;
            for (t, &x) in xs.iter().enumerate() {
                st = layer.step(tape, &self.store, x, &st)?;
                fired += st.s_hard.sum().as_f64();
                next.push(st.v);
                pass.schedule.push((offset + l, t));
            }
            pass.telemetry.push(LayerTelemetry {
                name: format!("est{l}"),
                firing_rate: fired / (xs.len() * batch * layer.cfg.hidden_dim).max(1) as f64,
            });
            top = Some((*xs.last().expect("non-empty"), st));
            xs = next;
        }
        let (x_last, st) = top.expect("at least one layer");
        let layer = self.estimator.last().expect("at least one layer");
        let r = layer.readout(tape, &self.store, x_last, &st)?;
        let w = tape.param(self.head_w, self.store.get(self.head_w));
        let b = tape.param(self.head_b, self.store.get(self.head_b));
        let y = tape.matmul(r, w)?;
        tape.add_bias(y, b)
    }

    /// Full pipeline on a batch.
    pub fn forward(&self, tape: &mut Tape<T>, spikes: &SpikeTensor, mode: Mode) -> Result<ForwardPass<T>> {
        let mut log = ForwardPassLog::default();
        let features = self.feature_extract(tape, spikes, mode, &mut log)?;
        let output = self.estimate_velocity(tape, &features, &mut log)?;
        Ok(ForwardPass {
            output,
            batch_stats: log.batch_stats,
            telemetry: log.telemetry,
            schedule: log.schedule,
            block_spikes: log.block_spikes,
            features,
        })
    }

    /// Inference: `[B, n, 6]` velocity records plus telemetry. An empty
    /// batch yields no records.
    pub fn predict(&self, spikes: &SpikeTensor) -> Result<(Vec<Vec<VelocityRecord>>, Vec<LayerTelemetry>)> {
        if spikes.shape()[1] == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, spikes, Mode::Eval)?;
        let out = tape.value(pass.output);
        Ok((to_records(out, self.cfg.window.n_bins), pass.telemetry))
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) {
        let m = T::lit(self.cfg.extractor.bn_momentum);
        for (blk, s) in self.blocks.iter().zip(stats) {
            let rm = self.store.get_mut(blk.running_mean);
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let rv = self.store.get_mut(blk.running_var);
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// Accumulates side outputs while a forward pass is recorded.
#[derive(Default)]
pub struct ForwardPassLog<T> {
    pub batch_stats: Vec<BatchStats<T>>,
    pub telemetry: Vec<LayerTelemetry>,
    pub schedule: Vec<(usize, usize)>,
    pub block_spikes: Vec<Var>,
}

/// Splits a `B x 6n` output into per-sample records.
pub fn to_records<T: Scalar>(out: &Tensor<T>, n_bins: usize) -> Vec<Vec<VelocityRecord>> {
    (0..out.rows())
        .map(|b| {
            out.row(b)
                .chunks(VELOCITY_COLUMNS)
                .take(n_bins)
                .enumerate()
                .map(|(k, r)| {
                    let r: Vec<f64> = r.iter().map(|v| v.as_f64()).collect();
                    VelocityRecord {
                        t: f64::NAN,
                        linear: [r[0], r[1], r[2]],
                        angular: [r[3], r[4], r[5]],
                        bin_index: k,
                    }
                })
                .collect()
        })
        .collect()
}
