//! Desk-scale unsupervised feature learning with RICA layers.
//!
//! The crate provides, end to end: a deterministic f64 tensor core with a
//! finite-difference gradient oracle, the RICA cost/gradient/projection
//! machinery, untied local receptive-field layers with local contrast
//! normalization, a pipelined layer-wise trainer built on immutable
//! parameter snapshots, an in-process model-parallel simulator with exact
//! communication accounting, the dataset container and preprocessing path,
//! and checkpoint/analysis utilities (top-K stimuli, filter grids).
//!
//! Every run is deterministic given its seed and configuration: fixed
//! accumulation orders, seeded ChaCha streams per layer and field, and a
//! sequential reference scheduler for the pipelined and distributed modes.

pub mod analysis;
pub mod config;
pub mod datapipe;
pub mod distsim;
pub mod error;
pub mod layers;
pub mod network;
pub mod pipeline;
pub mod rica;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use network::Network;
pub use rica::RicaParams;
pub use tensor::Tensor;
