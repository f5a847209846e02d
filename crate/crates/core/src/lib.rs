//! Self-supervised representation learning posed as second-order graph
//! matching between two augmented views of a batch.
//!
//! The pipeline: [`synth`] corpus → [`augment`] view pairs → [`encoder`]
//! feature maps and embeddings → [`graphnet`] kNN graphs and message passing
//! → [`affinity`] vertex/edge affinities → [`imle`] perturbed [`matcher`]
//! solve and gradient estimate → [`trainer`] parameter update.

pub mod ablation;
pub mod affinity;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graphnet;
pub mod imle;
pub mod matcher;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
