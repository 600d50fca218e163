//! Leaky integrate-and-fire dynamics with membrane-potential diffusion.
//!
//! Both neuron kinds use the discrete update
//!
//! ```text
//! v[t+1] = (1 - s[t]) * alpha * v[t] + I[t] + D * v_donor
//! s[t+1] = H(v[t+1] - v_th)
//! ```
//!
//! where `I` is the synaptic drive already produced by the enclosing layer
//! and `v_donor` is the donor membrane potential. Plain LIF is the `D = 0`
//! case. Reset is hard: a spike zeroes the decayed-membrane term at the next
//! step.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams<T> {
    /// Membrane decay per step, `1 - dt/tau`.
    pub alpha: T,
    /// Input scale `dt/tau`; folded into the synaptic weights by callers.
    pub beta: T,
    pub v_th: T,
    /// Always zero: the hard reset targets the resting potential.
    pub v_rest: T,
    /// Diffusion coefficient `D`.
    pub diffusion_d: T,
}

impl<T: Scalar> Default for NeuronParams<T> {
    fn default() -> Self {
        Self::new(T::lit(0.9), T::one(), T::lit(0.5))
    }
}

impl<T: Scalar> NeuronParams<T> {
    pub fn new(alpha: T, v_th: T, diffusion_d: T) -> Self {
        Self {
            alpha,
            beta: T::one() - alpha,
            v_th,
            v_rest: T::zero(),
            diffusion_d,
        }
    }

    /// Same parameters with diffusion switched off.
    pub fn without_diffusion(self) -> Self {
        Self {
            diffusion_d: T::zero(),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        if !(self.alpha > z && self.alpha < T::one()) {
            return Err(Error::InvalidParam(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.beta > z) {
            return Err(Error::InvalidParam(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.v_th > z) {
            return Err(Error::InvalidParam(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if self.v_rest != z {
            return Err(Error::InvalidParam("v_rest must be 0".into()));
        }
        if !(self.diffusion_d >= z) {
            return Err(Error::InvalidParam(format!(
                "diffusion_d must be >= 0, got {}",
                self.diffusion_d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<T> {
    pub v: Vec<T>,
    /// Spikes emitted at the previous step, each 0 or 1.
    pub s: Vec<T>,
    /// Donor potentials; zero when no donor exists.
    pub v_final_prev_layer: Vec<T>,
}

impl<T: Scalar> NeuronState<T> {
    pub fn at_rest(n: usize) -> Self {
        Self {
            v: vec![T::zero(); n],
            s: vec![T::zero(); n],
            v_final_prev_layer: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn with_donor(mut self, donor: Vec<T>) -> Result<Self> {
        ensure_len("donor potentials", self.v.len(), donor.len())?;
        self.v_final_prev_layer = donor;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        ensure_len("spike vector", self.v.len(), self.s.len())?;
        ensure_len("donor vector", self.v.len(), self.v_final_prev_layer.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    #[default]
    Rectangular,
    Arctan,
}

impl std::str::FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangular" | "rect" => Ok(Self::Rectangular),
            "arctan" | "atan" => Ok(Self::Arctan),
            other => Err(Error::Config(format!("unknown surrogate kind `{other}`"))),
        }
    }
}

/// Stand-in derivative of the Heaviside step used during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec<T> {
    pub kind: SurrogateKind,
    pub width: T,
}

impl<T: Scalar> Default for SurrogateSpec<T> {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Rectangular,
            width: T::one(),
        }
    }
}

impl<T: Scalar> SurrogateSpec<T> {
    pub fn new(kind: SurrogateKind, width: T) -> Result<Self> {
        let spec = Self { kind, width };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width > T::zero() && self.width.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "surrogate width must be > 0, got {}",
                self.width
            )))
        }
    }

    /// Smooth step whose derivative is [`surrogate_grad`]. Used to build
    /// finite-difference references for surrogate backpropagation.
    pub fn antiderivative(&self, v: T, v_th: T) -> T {
        let x = v - v_th;
        let half = T::lit(0.5);
        match self.kind {
            SurrogateKind::Rectangular => (x / self.width + half).max(T::zero()).min(T::one()),
            SurrogateKind::Arctan => half + (T::PI() * self.width * x * half).atan() / T::PI(),
        }
    }
}

/// Fick's-law flux between two potentials: `d * (v_i - v_j)`.
#[inline]
pub fn diffusion_term<T: Scalar>(v_i: T, v_j: T, d: T) -> T {
    d * (v_i - v_j)
}

/// Firing rule: 1 when `v >= v_th`, else 0.
#[inline]
pub fn heaviside<T: Scalar>(v: T, v_th: T) -> T {
    if v >= v_th {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub fn surrogate_grad<T: Scalar>(v: T, v_th: T, spec: &SurrogateSpec<T>) -> T {
    let x = v - v_th;
    match spec.kind {
        SurrogateKind::Rectangular => {
            if x.abs() <= spec.width * T::lit(0.5) {
                T::one() / spec.width
            } else {
                T::zero()
            }
        }
        SurrogateKind::Arctan => {
            let z = T::PI() * spec.width * x * T::lit(0.5);
            spec.width / (T::lit(2.0) * (T::one() + z * z))
        }
    }
}

/// Decayed membrane with the hard reset applied.
#[inline]
pub(crate) fn reset_decay<T: Scalar>(v: T, s: T, alpha: T) -> T {
    if s == T::one() {
        T::zero()
    } else {
        alpha * v
    }
}

fn step_kernel<T: Scalar>(
    state: &NeuronState<T>,
    input: &[T],
    params: &NeuronParams<T>,
    d: T,
) -> Result<(NeuronState<T>, Vec<T>)> {
    state.check()?;
    ensure_len("neuron input", state.len(), input.len())?;
    let mut v = Vec::with_capacity(state.len());
    for j in 0..state.len() {
        let drive = if d == T::zero() {
            input[j]
        } else {
            input[j] + d * state.v_final_prev_layer[j]
        };
        v.push(reset_decay(state.v[j], state.s[j], params.alpha) + drive);
    }
    let s: Vec<T> = v.iter().map(|&x| heaviside(x, params.v_th)).collect();
    let next = NeuronState {
        v,
        s: s.clone(),
        v_final_prev_layer: state.v_final_prev_layer.clone(),
    };
    Ok((next, s))
}

/// One LIF step. The diffusion coefficient in `params` is ignored.
pub fn lif_step<T: Scalar>(
    state: &NeuronState<T>,
    input: &[T],
    params: &NeuronParams<T>,
) -> Result<(NeuronState<T>, Vec<T>)> {
    step_kernel(state, input, params, T::zero())
}

/// One ALIF step: LIF plus diffusion of the donor potentials into the drive.
/// The donor vector is carried over unchanged.
pub fn alif_step<T: Scalar>(
    state: &NeuronState<T>,
    input: &[T],
    params: &NeuronParams<T>,
) -> Result<(NeuronState<T>, Vec<T>)> {
    step_kernel(state, input, params, params.diffusion_d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    Lif,
    Alif,
}

impl std::str::FromStr for NeuronKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lif" => Ok(Self::Lif),
            "alif" => Ok(Self::Alif),
            other => Err(Error::Config(format!("unknown neuron kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lif => "lif",
            Self::Alif => "alif",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(alpha: f64, v_th: f64, d: f64) -> NeuronParams<f64> {
        NeuronParams::new(alpha, v_th, d)
    }

    #[test]
    fn diffusion_examples() {
        assert_eq!(diffusion_term(1.0, 1.0, 0.5), 0.0);
        assert_eq!(diffusion_term(0.8, 0.0, 0.0), 0.0);
        assert!((diffusion_term(0.8, 0.2, 0.5) - 0.3f64).abs() < 1e-15);
    }

    #[test]
    fn heaviside_examples() {
        assert_eq!(heaviside(0.99, 1.0), 0.0);
        assert_eq!(heaviside(1.0, 1.0), 1.0);
        assert_eq!(heaviside(-3.0, 1.0), 0.0);
    }

    #[test]
    fn surrogate_examples() {
        let spec = SurrogateSpec::<f64>::default();
        assert_eq!(surrogate_grad(1.0, 1.0, &spec), 1.0);
        assert_eq!(surrogate_grad(11.0, 1.0, &spec), 0.0);
        // 0.3 <= 0.5, inside the window
        assert_eq!(surrogate_grad(1.3, 1.0, &spec), 1.0);
        let atan = SurrogateSpec::new(SurrogateKind::Arctan, 2.0f64).unwrap();
        assert!((surrogate_grad(1.0, 1.0, &atan) - 1.0).abs() < 1e-15);
        assert!(surrogate_grad(1.5, 1.0, &atan) < surrogate_grad(1.1, 1.0, &atan));
        assert!(SurrogateSpec::new(SurrogateKind::Rectangular, 0.0f64).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(p(0.9, 1.0, 0.5).validate().is_ok());
        assert!(p(1.0, 1.0, 0.5).validate().is_err());
        assert!(p(0.9, 0.0, 0.5).validate().is_err());
        assert!(p(0.9, 1.0, -0.1).validate().is_err());
    }

    #[test]
    fn lif_rest_stays_at_rest() {
        let st = NeuronState::at_rest(1);
        let (next, spikes) = lif_step(&st, &[0.0], &p(0.9, 1.0, 0.5)).unwrap();
        assert_eq!(next.v, vec![0.0]);
        assert_eq!(spikes, vec![0.0]);
    }

    #[test]
    fn lif_constant_drive_first_spike_at_step_four() {
        // hand iteration: 0.3, 0.57, 0.813, 1.0317
        let params = p(0.9, 1.0, 0.0);
        let mut st = NeuronState::at_rest(1);
        let mut first = None;
        for step in 1..=10 {
            let (next, s) = lif_step(&st, &[0.3], &params).unwrap();
            st = next;
            if s[0] == 1.0 {
                first = Some(step);
                break;
            }
        }
        assert_eq!(first, Some(4));
        assert!((st.v[0] - 1.0317).abs() < 1e-12);
    }

    #[test]
    fn lif_reset_after_spike() {
        let st = NeuronState {
            v: vec![1.2],
            s: vec![1.0],
            v_final_prev_layer: vec![0.0],
        };
        let (next, s) = lif_step(&st, &[0.0], &p(0.9, 1.0, 0.5)).unwrap();
        assert_eq!(next.v, vec![0.0]);
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn alif_direct_evaluation() {
        let st = NeuronState::at_rest(1).with_donor(vec![0.5]).unwrap();
        let (next, _) = alif_step(&st, &[0.0], &p(0.9, 1.0, 0.4)).unwrap();
        assert!((next.v[0] - 0.2).abs() < 1e-15);
        assert_eq!(next.v_final_prev_layer, vec![0.5]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let st = NeuronState::<f64>::at_rest(2);
        assert!(matches!(
            lif_step(&st, &[0.0], &NeuronParams::default()),
            Err(Error::Dimension { .. })
        ));
        let bad = NeuronState {
            v: vec![0.0; 2],
            s: vec![0.0],
            v_final_prev_layer: vec![0.0; 2],
        };
        assert!(alif_step(&bad, &[0.0, 0.0], &NeuronParams::default()).is_err());
    }

    #[test]
    fn rectangular_surrogate_integrates_to_one() {
        for &w in &[0.1, 0.5, 1.0, 3.7] {
            let spec = SurrogateSpec::new(SurrogateKind::Rectangular, w).unwrap();
            let n = 200_000;
            let lo = -2.0 * w;
            let h = 4.0 * w / n as f64;
            let integral: f64 = (0..n)
                .map(|i| surrogate_grad(lo + (i as f64 + 0.5) * h, 0.0, &spec) * h)
                .sum();
            assert!((integral - 1.0).abs() < 1e-3, "width {w}: {integral}");
        }
    }

    #[test]
    fn antiderivative_matches_surrogate() {
        for kind in [SurrogateKind::Rectangular, SurrogateKind::Arctan] {
            let spec = SurrogateSpec::new(kind, 0.8f64).unwrap();
            for &v in &[0.2, 0.75, 1.1, 1.35, 2.0] {
                let h = 1e-6;
                let fd = (spec.antiderivative(v + h, 1.0) - spec.antiderivative(v - h, 1.0)) / (2.0 * h);
                assert!((fd - surrogate_grad(v, 1.0, &spec)).abs() < 1e-6, "{kind:?} {v}");
            }
        }
    }

    fn state_strategy(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(-2.0..2.0f64, n),
        )
    }

    proptest! {
        #[test]
        fn alif_without_diffusion_is_lif((v, s, donor, input) in state_strategy(6), alpha in 0.05..0.99f64) {
            let st = NeuronState {
                v,
                s: s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                v_final_prev_layer: donor,
            };
            let params = NeuronParams::new(alpha, 1.0, 0.0);
            let a = alif_step(&st, &input, &params).unwrap();
            let b = lif_step(&st, &input, &params).unwrap();
            for (x, y) in a.0.v.iter().zip(&b.0.v) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(a.1, b.1);
        }

        #[test]
        fn spikes_binary_and_reset_drops_memory((v, s, donor, input) in state_strategy(5), d in 0.0..1.0f64) {
            let st = NeuronState {
                v: v.clone(),
                s: s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                v_final_prev_layer: donor.clone(),
            };
            let params = NeuronParams::new(0.9, 1.0, d);
            let (next, spikes) = alif_step(&st, &input, &params).unwrap();
            for j in 0..5 {
                prop_assert!(spikes[j] == 0.0 || spikes[j] == 1.0);
                if s[j] {
                    let expect = input[j] + d * donor[j];
                    let expect = if d == 0.0 { input[j] } else { expect };
                    prop_assert_eq!(next.v[j], 0.0 + expect);
                }
            }
        }

        #[test]
        fn subthreshold_potential_is_bounded(inputs in prop::collection::vec(-0.05..0.05f64, 400), alpha in 0.5..0.95f64) {
            // |drive| <= M and no spikes => |v| <= M / (1 - alpha)
            let params = NeuronParams::new(alpha, 1.0, 0.0);
            let bound = 0.05 / (1.0 - alpha) + 1e-12;
            let mut st = NeuronState::at_rest(1);
            for x in inputs {
                st = lif_step(&st, &[x], &params).unwrap().0;
                prop_assert!(st.v[0].abs() <= bound);
            }
        }
    }
}
