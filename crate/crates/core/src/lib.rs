//! Hierarchical, densely connected 3D CNN for glioma segmentation, built on
//! a small reverse-mode tensor engine.
//!
//! Two pathways share one architecture: the FLAIR/T2 pathway predicts the
//! whole tumor, and its features join the T1/T1-CE pathway to predict the
//! four-class label map. Each pathway stacks dense blocks of valid 3x3x3
//! convolutions and scores every stage separately, so a 38^3 input patch
//! yields a 12^3 block of predictions that mixes 15^3 and 27^3 receptive
//! fields.
//!
//! Start from the crate examples for a tour; the modules are layered as
//! `tensor` -> `layers` -> `model` -> `train` / `infer`, with `data` and
//! `metrics` on the side.

pub(crate) mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod infer;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::checkpoint::Checkpoint;
pub use model::{Model, NetworkSpec, Variant};
pub use tensor::{Graph, NodeId, Scalar, Tensor};
