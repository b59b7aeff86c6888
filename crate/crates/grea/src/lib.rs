//! Graph rationalization with environment-based augmentation.
//!
//! The crate trains a small graph neural network to split each input graph
//! into a rationale subgraph and an environment subgraph, augments the
//! batch by swapping environment representations between graphs in latent
//! space, and alternates optimization between the separator and the
//! predictor. Everything runs on a self-contained f64 autodiff engine;
//! there is no external tensor runtime.

pub mod bench;
pub mod data;
pub mod gnn;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
