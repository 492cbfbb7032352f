pub mod checkpoint;
pub mod config;
pub mod d2r;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imagecore;
pub mod losses;
pub mod networks;
pub mod params;
pub mod pipeline;
pub mod r2d;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use config::{ModelConfig, RunConfig, Schedule, Task};
pub use d2r::{D2RModel, D2ROutput, D2RVariant};
pub use data::{GarmentLabel, Length, PairedSample};
pub use eval::{evaluate, MetricReport};
pub use imagecore::{FusionMask, ImagePlane, ValueRange};
pub use r2d::{R2DModel, R2DOutput, R2DVariant};
pub use sampler::{SaliencyMap, WarpGrid};
pub use train::{run_training, AnyModel, Manifest, Trainer};
