//! Desk-scale federated LoRA fine-tuning laboratory.
//!
//! Clients hold synthetic heterogeneous task data and train low-rank adapter
//! experts against a shared frozen base model. A brief initialization phase
//! exposes task similarity through the adapters' B matrices; agglomerative
//! clustering with silhouette-based selection then decides how many experts
//! to allocate and which clients share each one. During the main rounds,
//! every client trains only its assigned expert plus an adaptive top-M router
//! whose expanded output space guarantees the assigned expert participates in
//! every forward pass.
//!
//! Module map:
//! - [`numcore`]: matrices, softmax/top-k, seeded RNG, finite differences
//! - [`lora`]: adapter pairs, initialization, flattening, averaging
//! - [`routing`]: vanilla top-k and adaptive top-M gates
//! - [`clustering`]: distances, average-linkage merging, silhouette selection
//! - [`synthtasks`]: planted task groups and evaluation
//! - [`trainer`]: manual forward/backward, AdamW, local loop
//! - [`federation`]: the two-phase protocol, baselines, convergence monitor

pub mod clustering;
pub mod error;
pub mod federation;
pub mod lora;
pub mod numcore;
pub mod routing;
pub mod synthtasks;
pub mod trainer;

pub use error::{Error, Result};
