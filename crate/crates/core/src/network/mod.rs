//! Model assemblies built from the neuron and recurrent primitives.

pub mod forecaster;
pub mod neurove;

pub use forecaster::{CellKind, Forecaster, ForecasterConfig};
pub use neurove::{
    BlockConfig, EstimatorConfig, FeatureExtractorConfig, ForwardPass, LayerTelemetry, Mode, NeuroVe, NeuroVeConfig,
};
