// Negated float comparisons deliberately reject NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::unusual_byte_groupings
)]

pub mod checkpoint;
pub mod error;
pub mod imageio;
pub mod kinematics;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod scenegen;
pub mod trajvae;
pub mod umd;
pub mod vaed;

pub use error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use kinematics::{KinematicChain, Pose};
pub use pipeline::{Overrides, PipelineConfig, RunRecord};
pub use policy::{EvalReport, Policy, PolicyConfig};
pub use scenegen::{LabelMasks, RandomizationConfig, RgbImage, SceneSpec};
pub use trajvae::{TrajVae, TrajVaeConfig, Trajectory};
pub use vaed::{TrainConfig, Vaed, VaedConfig};
