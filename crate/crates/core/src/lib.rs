//! Multi-view pedestrian detection on a bird's-eye-view occupancy grid with
//! multi-scale feature projection.

pub mod datasets;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod scenegen;
pub mod tensor;
pub mod trainer;

pub use datasets::{Annotation, Dataset, TargetMaps};
pub use error::{Error, Result};
pub use geometry::{BevGridSpec, CameraCalibration, SamplingGrid};
pub use inference::{Detection, DetectionSet, InferenceConfig, OccupancyMap};
pub use metrics::EvalResult;
pub use network::{Model, NetworkConfig};
pub use scenegen::SceneSpec;
pub use trainer::{RunConfig, TrainConfig};
