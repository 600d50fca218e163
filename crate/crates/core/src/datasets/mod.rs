//! Dataset generation and ingestion.

pub mod poses;
pub mod sine;
pub mod synthetic;
pub mod velocity;

pub use poses::{poses_to_velocity, PoseSample, VelocityRecord};
pub use sine::{gen_sine_dataset, SineDataset, SineDatasetSpec};
pub use synthetic::{gen_synthetic_events, MotionRanges, SyntheticClip, SyntheticSceneSpec, Trajectory};
pub use velocity::{load_events, Manifest, VelocityData, VelocityDatasetSpec, VelocitySample};
