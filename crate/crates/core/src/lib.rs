//! Exclave-attested federated learning.
//!
//! Simulated integrity-only exclaves run the tasks of a federated-learning
//! job and emit signed data records (EDRs). An auditor rebuilds the dataflow
//! graph from those records and checks claims about the trained model.

pub mod attestation;
pub mod auditor;
pub mod crypto;
pub mod edr;
pub mod error;
pub mod exclave;
pub mod orchestrator;
pub mod storage;
pub mod tasks;

pub use error::{Error, Result};

/// Model vector used on the wire and in every exclave.
pub type ModelVector = tasks::Model<f64>;
/// Single-precision model, for experimentation with the generic kernels.
pub type ModelVectorF32 = tasks::Model<f32>;
