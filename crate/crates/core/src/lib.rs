//! Concept-level explanations for small convolutional networks.
//!
//! The crate bundles everything needed to explain a CNN in terms of
//! user-defined visual concepts:
//!
//! - [`tensor`]: dense tensors, CNN kernels and a reverse-mode graph;
//! - [`model`]: architecture, training, evaluation and checkpoints;
//! - [`synthdata`]: procedurally rendered, tagged three-class datasets with
//!   ground-truth annotations;
//! - [`cav`]: difference-of-means concept activation vectors and pooling;
//! - [`conceptmap`]: concept localisation maps, range calibration, overlays;
//! - [`attribution`]: layer integrated gradients and concept attributions;
//! - [`baselines`]: TCAV scores with significance testing, and Grad-CAM.

pub mod attribution;
pub mod baselines;
pub mod cav;
pub mod conceptmap;
pub mod error;
pub mod exec;
pub mod model;
pub mod stats;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ArchitectureSpec, Model, TrainConfig};
pub use tensor::Tensor;
