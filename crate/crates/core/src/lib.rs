//! A laboratory for weight-keyed dormant backdoors in small neural networks.
//!
//! The crate trains three kinds of classifiers — standard, BadNet-style
//! poisoned, and dormant-trojan models whose trigger response is unlocked
//! only by adding a secret weight key δ to the parameters θ — and evaluates
//! them against a reverse-engineering backdoor detector and magnitude
//! pruning.
//!
//! Layout:
//! - [`tensor`] / [`graph`]: dense f32 tensors and reverse-mode autodiff
//! - [`nn`]: network specs, parameter sets, forward/predict
//! - [`data`]: IDX ingestion, synthetic data, trigger pasting
//! - [`key`]: secret weight keys, their file format, the pruning-resistance loss
//! - [`train`]: the three training regimes and Acc-C/Acc-T evaluation
//! - [`detect`]: per-class trigger reverse-engineering and anomaly indices
//! - [`prune`]: magnitude pruning and resistance curves
//! - [`checkpoint`]: binary model snapshots
//! - [`config`]: experiment configuration files

pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod nn;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
