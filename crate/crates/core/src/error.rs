//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the federated fine-tuning laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Two operands have incompatible shapes for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    /// An operation received an empty input it cannot define a result for.
    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    /// An index or count argument is outside its valid range.
    #[error("{op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },

    /// A vector with zero Euclidean norm reached a cosine computation.
    #[error("zero-norm vector in {0}")]
    DegenerateVector(&'static str),

    /// A client's flattened B matrix has zero norm at some layer, which makes
    /// the cosine dissimilarity undefined. Happens only when the client ran
    /// zero training steps, since B starts at zero.
    #[error(
        "client {client} has a zero-norm B vector at layer {layer} (no training steps taken?)"
    )]
    DegenerateClient { client: usize, layer: usize },

    /// A non-finite value (NaN or infinity) was produced or supplied.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A backward pass was attempted with a cache from a different model state.
    #[error("stale cache: model revision {model} does not match cache revision {cache}")]
    StaleCache { model: u64, cache: u64 },

    /// A round completed without an update from every client.
    #[error("missing update from client {0}")]
    MissingUpdate(usize),
}
