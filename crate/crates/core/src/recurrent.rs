//! Gated spiking recurrent cell with an embedded diffusing membrane.
//!
//! Per step, with `v_prev` the membrane potential from the previous step:
//!
//! ```text
//! [i f g o] = W x + U r            r = v_prev (membrane recurrence) or s_prev (spike recurrence)
//! c  = sig(f) * c_prev + sig(i) * tanh(g)
//! h  = sig(o) * tanh(c)
//! v  = alpha * (1 - s_prev) * h + W_x x + D * v_prev
//! s  = H(v - v_th)
//! ```
//!
//! The non-spiking readout at the final step is
//! `kappa * v + W_out x + D * v_prev`.
//!
//! The spiking baseline cell is the same cell with `D = 0` and spike
//! recurrence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::neuron::{heaviside, reset_decay, SurrogateSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::params::ParamStore;
use crate::training::tape::{sigmoid, ParamId, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Recurrence {
    /// Gates see the previous membrane potential.
    #[default]
    Membrane,
    /// Gates see the previous spikes.
    Spike,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub alpha: T,
    pub v_th: T,
    pub diffusion_d: T,
    pub kappa: T,
    pub recurrence: Recurrence,
    pub gate_bias: bool,
    pub surrogate: SurrogateSpec<T>,
}

impl<T: Scalar> CellConfig<T> {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            alpha: T::lit(0.9),
            v_th: T::one(),
            diffusion_d: T::lit(0.5),
            kappa: T::lit(0.5),
            recurrence: Recurrence::Membrane,
            gate_bias: false,
            surrogate: SurrogateSpec::default(),
        }
    }

    /// The spiking baseline: no diffusion, spike-driven gates.
    pub fn slstm(self) -> Self {
        Self {
            diffusion_d: T::zero(),
            recurrence: Recurrence::Spike,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (z, one) = (T::zero(), T::one());
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("cell dimensions must be >= 1".into()));
        }
        if !(self.alpha > z && self.alpha < one) {
            return Err(Error::InvalidParam(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.kappa > z && self.kappa < one) {
            return Err(Error::InvalidParam(format!(
                "kappa must lie in (0, 1), got {}",
                self.kappa
            )));
        }
        if !(self.v_th > z) {
            return Err(Error::InvalidParam("v_th must be > 0".into()));
        }
        if !(self.diffusion_d >= z) {
            return Err(Error::InvalidParam("diffusion_d must be >= 0".into()));
        }
        self.surrogate.validate()
    }
}

/// Weights of one cell. Input matrices are `input_dim x hidden_dim`,
/// recurrent matrices `hidden_dim x hidden_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AslstmParams<T> {
    pub w_i: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_g: Tensor<T>,
    pub w_o: Tensor<T>,
    pub u_i: Tensor<T>,
    pub u_f: Tensor<T>,
    pub u_g: Tensor<T>,
    pub u_o: Tensor<T>,
    /// Synaptic map driving the membrane.
    pub w_x: Tensor<T>,
    /// Synaptic map of the readout neuron.
    pub w_out: Tensor<T>,
    /// Gate biases `[i f g o]`, `1 x 4H`, when enabled.
    pub bias: Option<Tensor<T>>,
    pub cfg: CellConfig<T>,
}

impl<T: Scalar> AslstmParams<T> {
    pub fn zeros(cfg: CellConfig<T>) -> Self {
        let (n, h) = (cfg.input_dim, cfg.hidden_dim);
        Self {
            w_i: Tensor::zeros(n, h),
            w_f: Tensor::zeros(n, h),
            w_g: Tensor::zeros(n, h),
            w_o: Tensor::zeros(n, h),
            u_i: Tensor::zeros(h, h),
            u_f: Tensor::zeros(h, h),
            u_g: Tensor::zeros(h, h),
            u_o: Tensor::zeros(h, h),
            w_x: Tensor::zeros(n, h),
            w_out: Tensor::zeros(n, h),
            bias: cfg.gate_bias.then(|| Tensor::zeros(1, 4 * h)),
            cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let (n, h) = (self.cfg.input_dim, self.cfg.hidden_dim);
        for w in [&self.w_i, &self.w_f, &self.w_g, &self.w_o, &self.w_x, &self.w_out] {
            if w.shape() != (n, h) {
                return Err(Error::Shape(format!(
                    "input weights {:?}, expected {:?}",
                    w.shape(),
                    (n, h)
                )));
            }
        }
        for u in [&self.u_i, &self.u_f, &self.u_g, &self.u_o] {
            if u.shape() != (h, h) {
                return Err(Error::Shape(format!(
                    "recurrent weights {:?}, expected {:?}",
                    u.shape(),
                    (h, h)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AslstmState<T> {
    pub c: Vec<T>,
    pub h: Vec<T>,
    pub v: Vec<T>,
    pub s: Vec<T>,
    /// Membrane potential one step before `v`.
    pub v_prev: Vec<T>,
}

impl<T: Scalar> AslstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        let z = vec![T::zero(); hidden];
        Self {
            c: z.clone(),
            h: z.clone(),
            v: z.clone(),
            s: z.clone(),
            v_prev: z,
        }
    }
}

/// Continuous readout of the output neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputReadout<T> {
    pub value: Vec<T>,
    pub kappa: T,
}

fn vec_mat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    for (k, &xk) in x.iter().enumerate() {
        if xk == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
    out
}

/// Membrane update `alpha * (1 - s_prev) * h + W_x x + D * v_prev`.
pub fn alif_state_update<T: Scalar>(
    h: &[T],
    x: &[T],
    v_prev: &[T],
    s_prev: &[T],
    params: &AslstmParams<T>,
) -> Result<Vec<T>> {
    let hd = params.cfg.hidden_dim;
    ensure_len("hidden vector", hd, h.len())?;
    ensure_len("cell input", params.cfg.input_dim, x.len())?;
    ensure_len("previous potential", hd, v_prev.len())?;
    ensure_len("previous spikes", hd, s_prev.len())?;
    let drive = vec_mat(x, &params.w_x);
    let d = params.cfg.diffusion_d;
    Ok((0..hd)
        .map(|j| {
            let base = reset_decay(h[j], s_prev[j], params.cfg.alpha) + drive[j];
            if d == T::zero() {
                base
            } else {
                base + d * v_prev[j]
            }
        })
        .collect())
}

/// One cell step for a single sample.
pub fn aslstm_step<T: Scalar>(
    state: &AslstmState<T>,
    x: &[T],
    params: &AslstmParams<T>,
) -> Result<(AslstmState<T>, Vec<T>)> {
    let hd = params.cfg.hidden_dim;
    ensure_len("cell input", params.cfg.input_dim, x.len())?;
    for v in [&state.c, &state.h, &state.v, &state.s, &state.v_prev] {
        ensure_len("cell state", hd, v.len())?;
    }
    let rec = match params.cfg.recurrence {
        Recurrence::Membrane => &state.v,
        Recurrence::Spike => &state.s,
    };
    let gate = |w: &Tensor<T>, u: &Tensor<T>, k: usize| -> Vec<T> {
        let mut a = vec_mat(x, w);
        for (o, r) in a.iter_mut().zip(vec_mat(rec, u)) {
            *o += r;
        }
        if let Some(b) = &params.bias {
            for (j, o) in a.iter_mut().enumerate() {
                *o += b.get(0, k * hd + j);
            }
        }
        a
    };
    let i = gate(&params.w_i, &params.u_i, 0);
    let f = gate(&params.w_f, &params.u_f, 1);
    let g = gate(&params.w_g, &params.u_g, 2);
    let o = gate(&params.w_o, &params.u_o, 3);
    let c: Vec<T> = (0..hd)
        .map(|j| sigmoid(f[j]) * state.c[j] + sigmoid(i[j]) * g[j].tanh())
        .collect();
    let h: Vec<T> = (0..hd).map(|j| sigmoid(o[j]) * c[j].tanh()).collect();
    let v = alif_state_update(&h, x, &state.v, &state.s, params)?;
    let s: Vec<T> = v.iter().map(|&p| heaviside(p, params.cfg.v_th)).collect();
    let next = AslstmState {
        c,
        h,
        v_prev: state.v.clone(),
        v,
        s: s.clone(),
    };
    Ok((next, s))
}

/// Baseline spiking cell: [`aslstm_step`] with diffusion off and spike
/// recurrence, regardless of what `params.cfg` says.
pub fn slstm_step<T: Scalar>(
    state: &AslstmState<T>,
    x: &[T],
    params: &AslstmParams<T>,
) -> Result<(AslstmState<T>, Vec<T>)> {
    let mut p = params.clone();
    p.cfg = p.cfg.slstm();
    aslstm_step(state, x, &p)
}

/// Output neuron at the final step: `kappa * v_tf + W_out x_tf + D * v_prev`.
pub fn output_neuron<T: Scalar>(
    v_tf: &[T],
    x_tf: &[T],
    v_prev: &[T],
    params: &AslstmParams<T>,
) -> Result<OutputReadout<T>> {
    let hd = params.cfg.hidden_dim;
    ensure_len("final potential", hd, v_tf.len())?;
    ensure_len("final input", params.cfg.input_dim, x_tf.len())?;
    ensure_len("previous potential", hd, v_prev.len())?;
    let drive = vec_mat(x_tf, &params.w_out);
    let (k, d) = (params.cfg.kappa, params.cfg.diffusion_d);
    let value = (0..hd)
        .map(|j| {
            let base = k * v_tf[j] + drive[j];
            if d == T::zero() {
                base
            } else {
                base + d * v_prev[j]
            }
        })
        .collect();
    Ok(OutputReadout { value, kappa: k })
}

/// Trainable cell whose weights live in a [`ParamStore`]. Gate and membrane
/// input weights are stored fused as `input_dim x 5H` (`[i f g o x]`),
/// recurrent weights as `H x 4H`.
#[derive(Clone, Debug)]
pub struct AslstmLayer<T> {
    pub cfg: CellConfig<T>,
    w_in: ParamId,
    w_rec: ParamId,
    w_out: ParamId,
    bias: Option<ParamId>,
}

/// Batched recurrent state on a tape; rows are samples.
#[derive(Clone, Debug)]
pub struct LayerState<T> {
    pub c: Var,
    pub v: Var,
    pub v_prev: Var,
    pub s: Var,
    /// Hard spike values, used for the reset mask.
    pub s_hard: Tensor<T>,
}

impl<T: Scalar> AslstmLayer<T> {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: CellConfig<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (n, h) = (cfg.input_dim, cfg.hidden_dim);
        let bin = 1.0 / (n as f64).sqrt();
        let brec = 1.0 / (h as f64).sqrt();
        let w_in = store.add(format!("{name}.w_in"), Tensor::uniform(n, 5 * h, bin, rng));
        let w_rec = store.add(format!("{name}.w_rec"), Tensor::uniform(h, 4 * h, brec, rng));
        let w_out = store.add(format!("{name}.w_out"), Tensor::uniform(n, h, bin, rng));
        let bias = cfg
            .gate_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, 4 * h)));
        Ok(Self {
            cfg,
            w_in,
            w_rec,
            w_out,
            bias,
        })
    }

    /// Unfused copy of the weights.
    pub fn params(&self, store: &ParamStore<T>) -> AslstmParams<T> {
        let (n, h) = (self.cfg.input_dim, self.cfg.hidden_dim);
        let cols = |t: &Tensor<T>, k: usize, rows: usize| {
            let mut out = Tensor::zeros(rows, h);
            for r in 0..rows {
                out.row_mut(r).copy_from_slice(&t.row(r)[k * h..(k + 1) * h]);
            }
            out
        };
        let wi = store.get(self.w_in);
        let wr = store.get(self.w_rec);
        AslstmParams {
            w_i: cols(wi, 0, n),
            w_f: cols(wi, 1, n),
            w_g: cols(wi, 2, n),
            w_o: cols(wi, 3, n),
            w_x: cols(wi, 4, n),
            u_i: cols(wr, 0, h),
            u_f: cols(wr, 1, h),
            u_g: cols(wr, 2, h),
            u_o: cols(wr, 3, h),
            w_out: store.get(self.w_out).clone(),
            bias: self.bias.map(|b| store.get(b).clone()),
            cfg: self.cfg,
        }
    }

    /// Writes unfused weights back into the store.
    pub fn set_params(&self, store: &mut ParamStore<T>, p: &AslstmParams<T>) -> Result<()> {
        p.validate()?;
        let (n, h) = (self.cfg.input_dim, self.cfg.hidden_dim);
        let wi = store.get_mut(self.w_in);
        for (k, src) in [&p.w_i, &p.w_f, &p.w_g, &p.w_o, &p.w_x].into_iter().enumerate() {
            for r in 0..n {
                wi.row_mut(r)[k * h..(k + 1) * h].copy_from_slice(src.row(r));
            }
        }
        let wr = store.get_mut(self.w_rec);
        for (k, src) in [&p.u_i, &p.u_f, &p.u_g, &p.u_o].into_iter().enumerate() {
            for r in 0..h {
                wr.row_mut(r)[k * h..(k + 1) * h].copy_from_slice(src.row(r));
            }
        }
        *store.get_mut(self.w_out) = p.w_out.clone();
        if let (Some(id), Some(b)) = (self.bias, &p.bias) {
            *store.get_mut(id) = b.clone();
        }
        Ok(())
    }

    pub fn zero_state(&self, tape: &mut Tape<T>, batch: usize) -> LayerState<T> {
        let h = self.cfg.hidden_dim;
        let z = Tensor::zeros(batch, h);
        LayerState {
            c: tape.constant(z.clone()),
            v: tape.constant(z.clone()),
            v_prev: tape.constant(z.clone()),
            s: tape.constant(z.clone()),
            s_hard: z,
        }
    }

    /// Re-enters detached state values on a fresh tape.
    pub fn state_from_values(&self, tape: &mut Tape<T>, values: &StateValues<T>) -> LayerState<T> {
        LayerState {
            c: tape.constant(values.c.clone()),
            v: tape.constant(values.v.clone()),
            v_prev: tape.constant(values.v_prev.clone()),
            s: tape.constant(values.s.clone()),
            s_hard: values.s.clone(),
        }
    }

    pub fn step(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: &LayerState<T>,
    ) -> Result<LayerState<T>> {
        let h = self.cfg.hidden_dim;
        let batch = tape.value(x).rows();
        if tape.value(x).cols() != self.cfg.input_dim {
            return Err(Error::Dimension {
                context: "cell input",
                expected: self.cfg.input_dim,
                actual: tape.value(x).cols(),
            });
        }
        let w_in = tape.param(self.w_in, store.get(self.w_in));
        let w_rec = tape.param(self.w_rec, store.get(self.w_rec));
        let xin = tape.matmul(x, w_in)?;
        let gx = tape.slice_cols(xin, 0, 4 * h)?;
        let drive = tape.slice_cols(xin, 4 * h, h)?;
        let rec_src = match self.cfg.recurrence {
            Recurrence::Membrane => state.v,
            Recurrence::Spike => state.s,
        };
        let gr = tape.matmul(rec_src, w_rec)?;
        let mut gates = tape.add(gx, gr)?;
        if let Some(b) = self.bias {
            let bv = tape.param(b, store.get(b));
            gates = tape.add_bias(gates, bv)?;
        }
        let i = tape.slice_cols(gates, 0, h)?;
        let f = tape.slice_cols(gates, h, h)?;
        let g = tape.slice_cols(gates, 2 * h, h)?;
        let o = tape.slice_cols(gates, 3 * h, h)?;
        let (si, sf, tg, so) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let keep = tape.mul(sf, state.c)?;
        let write = tape.mul(si, tg)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let hid = tape.mul(so, tc)?;
        let decayed = tape.scale(hid, self.cfg.alpha);
        let mask = state.s_hard.map(|s| T::one() - s);
        let decayed = tape.mul_const(decayed, mask)?;
        let mut v = tape.add(decayed, drive)?;
        if self.cfg.diffusion_d != T::zero() {
            let j = tape.scale(state.v, self.cfg.diffusion_d);
            v = tape.add(v, j)?;
        }
        let s = tape.spike(v, self.cfg.v_th, self.cfg.surrogate);
        let s_hard = tape.value(v).map(|p| heaviside(p, self.cfg.v_th));
        debug_assert_eq!(s_hard.rows(), batch);
        Ok(LayerState {
            c,
            v,
            v_prev: state.v,
            s,
            s_hard,
        })
    }

    /// Output neuron over the batch at the current (final) step.
    pub fn readout(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, state: &LayerState<T>) -> Result<Var> {
        let w_out = tape.param(self.w_out, store.get(self.w_out));
        let drive = tape.matmul(x, w_out)?;
        let leak = tape.scale(state.v, self.cfg.kappa);
        let mut out = tape.add(leak, drive)?;
        if self.cfg.diffusion_d != T::zero() {
            let j = tape.scale(state.v_prev, self.cfg.diffusion_d);
            out = tape.add(out, j)?;
        }
        Ok(out)
    }
}

/// Detached copy of a [`LayerState`], carried between tapes.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues<T> {
    pub c: Tensor<T>,
    pub v: Tensor<T>,
    pub v_prev: Tensor<T>,
    pub s: Tensor<T>,
}

impl<T: Scalar> StateValues<T> {
    pub fn capture(tape: &Tape<T>, st: &LayerState<T>) -> Self {
        Self {
            c: tape.value(st.c).clone(),
            v: tape.value(st.v).clone(),
            v_prev: tape.value(st.v_prev).clone(),
            s: st.s_hard.clone(),
        }
    }
}
