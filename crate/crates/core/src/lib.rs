//! Landmark localization by heatmap regression on 3D volumes.
//!
//! The crate bundles volume geometry and I/O, a synthetic phantom generator, a family of
//! heatmap losses including an optimal-transport loss with a grid Lipschitz penalty, a
//! small 3D U-Net with hand-written backward passes, geometric evaluation metrics and the
//! training pipeline that ties them together.

pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod pipeline;
pub mod vec3;
pub mod volume;

pub use error::{Error, Result};
pub use loss::{LossKind, LossSpec};
pub use metrics::{DecodeRule, EvalReport, Plane};
pub use net::{HeadActivation, Network, NetworkConfig};
pub use phantom::{generate_dataset, generate_phantom, PhantomConfig};
pub use pipeline::{ExperimentConfig, PatchConfig, RunConfig};
pub use volume::{Grid, Heatmap, HeatmapConfig, Landmark, LandmarkSet, Quality, Sample, SampleMeta, Split, Volume};
