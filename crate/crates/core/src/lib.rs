//! Spiking recurrent networks with membrane-potential diffusion.
//!
//! The crate provides LIF/ALIF neuron dynamics, a gated spiking recurrent
//! cell whose state is a diffusing membrane potential, a reverse-mode
//! gradient engine with surrogate spike derivatives, event-stream spike
//! encoding, and the datasets and metrics needed to train and evaluate
//! sine regression/forecasting and event-camera velocity estimation models.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tools.

pub mod config;
pub mod datasets;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod pipeline;
pub mod recurrent;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = training::Tape<f32>;
pub type Tape64 = training::Tape<f64>;
pub type NeuronParams64 = neuron::NeuronParams<f64>;
pub type NeuronParams32 = neuron::NeuronParams<f32>;
