//! Annotation-free restoration of cataractous fundus images.
//!
//! Clear fundus images are degraded with a cataract model to build a paired
//! source domain. A U-Net generator guided by the high-frequency component
//! of its input learns to restore them, while a domain discriminator on the
//! outputs adapts it to real, unpaired cataract images.

pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod filter;
pub mod frequency;
pub mod image;
pub mod manifest;
pub mod network;
pub mod objectives;
pub mod phantom;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use evaluation::{EvalReport, Metric};
pub use experiment::{run_experiment, ExperimentSpec};
pub use frequency::{FrequencyPair, HighFrequencyGuidance, StructureGuidance};
pub use image::{FundusImage, Mask};
pub use manifest::{DatasetManifest, Entry, Role};
pub use network::{BundleSpec, ModelBundle};
pub use objectives::{LossReport, LossWeights};
pub use training::{fit, TrainConfig, Trainer};
