//! Stacked spiking recurrent regressor for scalar sequences.
//!
//! Each layer feeds its membrane potential to the next; the top layer's
//! output neuron is read every step and mapped to a scalar by an affine
//! head. Training runs teacher-forced (input `y[k]`, target `y[k+1]`);
//! forecasting feeds each prediction back as the next input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::SurrogateSpec;
use crate::recurrent::{AslstmLayer, CellConfig, LayerState, StateValues};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::params::ParamStore;
use crate::training::tape::{ParamId, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Aslstm,
    Slstm,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aslstm" => Ok(Self::Aslstm),
            "slstm" => Ok(Self::Slstm),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
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

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Aslstm,
            layers: 2,
            hidden: 64,
            alpha: 0.9,
            v_th: 1.0,
            diffusion_d: 0.5,
            kappa: 0.5,
            gate_bias: false,
            surrogate: SurrogateSpec::default(),
        }
    }
}

impl ForecasterConfig {
    pub fn cell_config<T: Scalar>(&self, input_dim: usize) -> CellConfig<T> {
        let cfg = CellConfig {
            input_dim,
            hidden_dim: self.hidden,
            alpha: T::lit(self.alpha),
            v_th: T::lit(self.v_th),
            diffusion_d: T::lit(self.diffusion_d),
            kappa: T::lit(self.kappa),
            recurrence: Default::default(),
            gate_bias: self.gate_bias,
            surrogate: SurrogateSpec {
                kind: self.surrogate.kind,
                width: T::lit(self.surrogate.width),
            },
        };
        match self.cell {
            CellKind::Aslstm => cfg,
            CellKind::Slstm => cfg.slstm(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Forecaster<T> {
    pub cfg: ForecasterConfig,
    pub layers: Vec<AslstmLayer<T>>,
    head_w: ParamId,
    head_b: ParamId,
    pub store: ParamStore<T>,
}

/// Detached recurrent state of every layer, batch rows in order.
pub type ForecasterState<T> = Vec<StateValues<T>>;

impl<T: Scalar> Forecaster<T> {
    pub fn new(cfg: ForecasterConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 {
            return Err(Error::Config(
                "forecaster needs at least one layer and hidden >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { 1 } else { cfg.hidden };
            layers.push(AslstmLayer::init(
                &mut store,
                &format!("cell{l}"),
                cfg.cell_config(input),
                &mut rng,
            )?);
        }
        let bound = 1.0 / (cfg.hidden as f64).sqrt();
        let head_w = store.add("head.w", Tensor::uniform(cfg.hidden, 1, bound, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, 1));
        Ok(Self {
            cfg,
            layers,
            head_w,
            head_b,
            store,
        })
    }

    pub fn zero_state(&self, batch: usize) -> ForecasterState<T> {
        let z = Tensor::zeros(batch, self.cfg.hidden);
        self.layers
            .iter()
            .map(|_| StateValues {
                c: z.clone(),
                v: z.clone(),
                v_prev: z.clone(),
                s: z.clone(),
            })
            .collect()
    }

    fn head(&self, tape: &mut Tape<T>, readout: Var) -> Result<Var> {
        let w = tape.param(self.head_w, self.store.get(self.head_w));
        let b = tape.param(self.head_b, self.store.get(self.head_b));
        let y = tape.matmul(readout, w)?;
        tape.add_bias(y, b)
    }

    /// Teacher-forced pass over `inputs` (`steps` tensors of `batch x 1`).
    /// Layers run one after another over the whole window. Returns one
    /// prediction node per step and the live final state of every layer.
    pub fn run_teacher_forced(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Tensor<T>],
        state: &ForecasterState<T>,
    ) -> Result<(Vec<Var>, Vec<LayerState<T>>)> {
        let mut xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let mut finals = Vec::with_capacity(self.layers.len());
        let mut readouts = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut st = layer.state_from_values(tape, &state[l]);
            let mut next_xs = Vec::with_capacity(xs.len());
            let top = l + 1 == self.layers.len();
            for &x in &xs {
                st = layer.step(tape, &self.store, x, &st)?;
                if top {
                    readouts.push(layer.readout(tape, &self.store, x, &st)?);
                }
                next_xs.push(st.v);
            }
            finals.push(st);
            xs = next_xs;
        }
        let preds = readouts
            .into_iter()
            .map(|r| self.head(tape, r))
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, finals))
    }

    pub fn capture(tape: &Tape<T>, states: &[LayerState<T>]) -> ForecasterState<T> {
        states.iter().map(|s| StateValues::capture(tape, s)).collect()
    }

    /// Closed-loop rollout from live state: `x` is the first input and each
    /// prediction becomes the next input, all recorded on `tape`.
    pub fn roll_from(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        steps: usize,
        mut states: Vec<LayerState<T>>,
    ) -> Result<(Vec<Var>, Vec<LayerState<T>>)> {
        let mut x = x;
        let mut preds = Vec::with_capacity(steps);
        let n = self.layers.len();
        for _ in 0..steps {
            let mut input = x;
            let mut out = None;
            for (l, layer) in self.layers.iter().enumerate() {
                states[l] = layer.step(tape, &self.store, input, &states[l])?;
                if l + 1 == n {
                    let r = layer.readout(tape, &self.store, input, &states[l])?;
                    out = Some(self.head(tape, r)?);
                }
                input = states[l].v;
            }
            x = out.expect("at least one layer");
            preds.push(x);
        }
        Ok((preds, states))
    }

    /// Closed-loop rollout starting from detached state.
    pub fn run_closed_loop(
        &self,
        tape: &mut Tape<T>,
        first: &Tensor<T>,
        steps: usize,
        state: &ForecasterState<T>,
    ) -> Result<(Vec<Var>, ForecasterState<T>)> {
        let states: Vec<LayerState<T>> = self
            .layers
            .iter()
            .zip(state)
            .map(|(l, s)| l.state_from_values(tape, s))
            .collect();
        let x = tape.constant(first.clone());
        let (preds, finals) = self.roll_from(tape, x, steps, states)?;
        Ok((preds, Self::capture(tape, &finals)))
    }

    /// Fit-then-forecast protocol. Inputs `y[0..fit_steps)` are fed
    /// teacher-forced, giving predictions of `y[1..=fit_steps]`; the model
    /// then runs closed-loop until `y[fit_steps + forecast_steps - 1]` has
    /// been predicted. Returns per sequence `(fit, forecast)` where `fit[i]`
    /// predicts `y[i + 1]` (`fit_steps - 1` values) and `forecast[i]`
    /// predicts `y[fit_steps + i]`.
    pub fn predict_sequences(
        &self,
        sequences: &[&[f64]],
        fit_steps: usize,
        forecast_steps: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let batch = sequences.len();
        if batch == 0 {
            return Ok(Vec::new());
        }
        if fit_steps == 0 || sequences.iter().any(|s| s.len() < fit_steps) {
            return Err(Error::Shape("sequence shorter than the fit segment".into()));
        }
        let mut state = self.zero_state(batch);
        let mut teacher = vec![Vec::with_capacity(fit_steps); batch];
        const CHUNK: usize = 100;
        let mut k = 0;
        while k < fit_steps {
            let len = CHUNK.min(fit_steps - k);
            let inputs: Vec<Tensor<T>> = (k..k + len).map(|t| column(sequences.iter().map(|s| s[t]))).collect();
            let mut tape = Tape::new();
            let (preds, finals) = self.run_teacher_forced(&mut tape, &inputs, &state)?;
            for p in preds {
                for (b, out) in teacher.iter_mut().enumerate() {
                    out.push(tape.value(p).get(b, 0).as_f64());
                }
            }
            state = Self::capture(&tape, &finals);
            k += len;
        }
        let mut forecast: Vec<Vec<f64>> = teacher
            .iter_mut()
            .map(|t| {
                let last = t.pop().expect("fit_steps >= 1");
                let mut f = Vec::with_capacity(forecast_steps);
                if forecast_steps > 0 {
                    f.push(last);
                }
                f
            })
            .collect();
        let mut last: Tensor<T> = column(forecast.iter().map(|f| f.first().copied().unwrap_or(0.0)));
        let mut done = 1;
        while done < forecast_steps {
            let len = CHUNK.min(forecast_steps - done);
            let mut tape = Tape::new();
            let (preds, next) = self.run_closed_loop(&mut tape, &last, len, &state)?;
            for &p in &preds {
                for (b, out) in forecast.iter_mut().enumerate() {
                    out.push(tape.value(p).get(b, 0).as_f64());
                }
            }
            last = tape.value(*preds.last().expect("len >= 1")).clone();
            state = next;
            done += len;
        }
        Ok(teacher.into_iter().zip(forecast).collect())
    }
}

impl<T: Scalar> Forecaster<T> {
    /// Mean spikes per neuron per step of every layer over a teacher-forced
    /// pass of the first `steps` inputs.
    pub fn firing_rates(&self, sequences: &[&[f64]], steps: usize) -> Result<Vec<f64>> {
        let batch = sequences.len();
        if batch == 0 || steps == 0 {
            return Ok(vec![0.0; self.layers.len()]);
        }
        if sequences.iter().any(|s| s.len() < steps) {
            return Err(Error::Shape("sequence shorter than the analysed segment".into()));
        }
        let mut state = self.zero_state(batch);
        let mut counts = vec![0.0; self.layers.len()];
        const CHUNK: usize = 100;
        let mut k = 0;
        while k < steps {
            let len = CHUNK.min(steps - k);
            let mut tape = Tape::new();
            let mut xs: Vec<Var> = (k..k + len)
                .map(|t| tape.constant(column(sequences.iter().map(|s| s[t]))))
                .collect();
            let mut next_state = Vec::with_capacity(self.layers.len());
            for (l, layer) in self.layers.iter().enumerate() {
                let mut st = layer.state_from_values(&mut tape, &state[l]);
                let mut next_xs = Vec::with_capacity(xs.len());
                for &x in &xs {
                    st = layer.step(&mut tape, &self.store, x, &st)?;
                    counts[l] += st.s_hard.data().iter().map(|v| v.as_f64()).sum::<f64>();
                    next_xs.push(st.v);
                }
                next_state.push(StateValues::capture(&tape, &st));
                xs = next_xs;
            }
            state = next_state;
            k += len;
        }
        let denom = (batch * steps * self.cfg.hidden) as f64;
        Ok(counts.into_iter().map(|c| c / denom).collect())
    }
}

pub(crate) fn column<T: Scalar>(values: impl Iterator<Item = f64>) -> Tensor<T> {
    let data: Vec<T> = values.map(T::lit).collect();
    let n = data.len();
    Tensor::from_vec(n, 1, data).expect("column length")
}
