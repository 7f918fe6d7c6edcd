//! Federated co-tuning of a server language model and client small
//! language models.
//!
//! Clients fine-tune LoRA adapters on a shared small model; the server
//! averages them (optionally under pairwise masking) and runs mutual
//! knowledge distillation between its large model and the aggregated
//! small model. Everything from the autodiff engine up is in this crate.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exec;
pub mod federation;
pub mod gradcheck;
pub mod lora;
pub mod losses;
pub mod model;
pub mod rng;
pub mod secagg;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::{Graph, NodeId, Tensor};

/// Hex SHA-256 of a vector's little-endian f64 bytes.
pub fn checksum_f64(values: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}
