//! Progressive-adaptation multi-modal tracker at desk scale.
//!
//! A frozen dual-stream ViT backbone is adapted to RGB+X input by three
//! adapter families: modality-dependent (frequency-split, cross-wired),
//! cross-modality entangled (fusion-guided cross-attention) and a head
//! adapter. The crate also carries the tensor engine underneath, a synthetic
//! RGB+thermal/depth/event benchmark, and the tracking metric suite.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
