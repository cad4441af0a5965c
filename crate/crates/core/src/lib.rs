//! Saliency maps for image segmentation models.
//!
//! The pipeline explains one predicted class of one image in two
//! stages: grow a sufficient region by repeated dilation until the
//! masked image reproduces the original prediction, then prune it by
//! gradient optimization into a minimally sufficient region. RISE,
//! occlusion, and gradient-CAM baselines plus evaluation metrics and a
//! post-hoc reliability classifier round out the toolkit.

pub mod adapter;
pub mod baselines;
pub mod config;
pub mod error;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod msr;
pub mod parallel;
pub mod records;
pub mod reliability;
pub mod sr;
pub mod toy;
pub mod triangle;
pub mod types;

pub use adapter::{Capabilities, SegmentationAdapter};
pub use config::MisureConfig;
pub use error::{MisureError, Result};
pub use types::{BinaryMask, ContinuousMask, Image, ProbabilityMap};
