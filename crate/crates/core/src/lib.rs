//! Joint object detection + semantic segmentation on a shared encoder.
//!
//! The crate implements the full pipeline from scratch: a small dense-tensor
//! engine with reverse-mode autodiff ([`tensor`]), a ResNet10-style shared
//! encoder with FCN8 segmentation and YOLO-v2-style detection decoders
//! ([`model`]), the weighted multi-task loss ([`loss`]), post-processing and
//! evaluation metrics ([`postproc`], [`metrics`]), polynomial fisheye
//! rectification ([`fisheye`]), a deterministic synthetic scene generator
//! ([`data`]), ADAM training with an STL/MTL study harness ([`train`]), and
//! an analytic + measured cost model ([`bench`]).
//!
//! Everything is deterministic: identical configs and seeds produce
//! bit-identical datasets, checkpoints and logs regardless of thread count.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod fisheye;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod postproc;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Elem, Tensor};
