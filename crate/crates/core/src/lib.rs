//! Hierarchical video-token compression built on selective state-space
//! scans: bidirectional blocks, gated patch aggregation onto periodically
//! inserted query tokens, and two-stage (frame, token) sampling, plus the
//! training and serialization machinery needed to exercise it end to end.

pub mod aggregate;
pub mod blocks;
pub mod error;
pub mod io;
pub mod num;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use num::{Dtype, Element};
pub use rng::Rng;
pub use tensor::Tensor;
