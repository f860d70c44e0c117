//! Compact global image descriptors from selected local convolutional features.
//!
//! The flow is: a [`FeatureTensor`](ingest::FeatureTensor) is masked
//! ([`masking`]), the surviving local features are PCA-compressed
//! ([`reduce`]), embedded against a learned vocabulary ([`codebook`],
//! [`embed`]), pooled into one vector ([`aggregate`]) and post-processed
//! ([`postprocess`]). [`pipeline`] composes those stages, [`retrieval`]
//! ranks descriptors and scores mean average precision.

pub mod aggregate;
pub mod analysis;
pub mod codebook;
pub mod embed;
pub mod error;
pub mod ingest;
pub mod linalg;
pub mod masking;
pub mod pipeline;
pub mod postprocess;
pub mod reduce;
pub mod retrieval;
pub mod synth;

pub use error::{Error, Result};
