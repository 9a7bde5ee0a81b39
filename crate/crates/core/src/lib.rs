//! Modular transfer learning on a small from-scratch autodiff engine.
//!
//! Pre-trained layer stacks are frozen and composed with fresh trainable
//! modules (two-towers and stitch topologies), compared against plain
//! fine-tuning on small data, and inspected through activation
//! maximization of individual convolution filters.

pub mod checkpoint;
pub mod composite;
pub mod data;
pub mod error;
pub mod experiment;
pub mod files;
pub mod graph;
pub mod module;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
