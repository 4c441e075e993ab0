pub mod backbone;
pub mod cold_start;
pub mod cost;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod mtp;
pub mod rng;
pub mod scaling;
pub mod train;
pub mod world;

pub use error::{Error, Result};

pub use backbone::{Checkpoint, ModelConfig, ParamSet};
pub use cost::{CostMode, CostQuery};
pub use eval::{EvalReport, Slice, StalenessConfig};
pub use scaling::{OffsetFit, ScalingPoint};
pub use train::{LadderSpec, TrainConfig};
pub use world::{DatasetPair, TaskCategory, WorldConfig};
