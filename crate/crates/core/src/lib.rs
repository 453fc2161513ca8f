//! Multi-scale gated-propagation video object segmentation.
//!
//! The crate carries the whole inference path: a small dense tensor core,
//! identity embeddings for multi-object masks, the gated propagation module,
//! the two-stage (stride 16 and 8) network with its memory bank, DAVIS-style
//! J/F evaluation, test-time augmentation with the two ensemble schemes, and
//! the file formats and synthetic data used by the `msdeaot` binary.

pub mod ensemble;
pub mod error;
pub mod gpm;
pub mod harness;
pub mod idmech;
mod init;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use idmech::{IdentityBank, LabelMask};
pub use tensor::Tensor;
