//! Gradient engine, optimiser, losses and training loops.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod params;
pub mod sine;
pub mod tape;
pub mod velocity;

pub use loss::{update_loss_scales, velocity_loss, LossScaleState, VelocityLoss};
pub use optim::{adam_step, Adam, AdamConfig, StepOutcome};
pub use params::ParamStore;
pub use tape::{ConvGeometry, Gradients, ParamId, SpikeForward, Tape, Var};
