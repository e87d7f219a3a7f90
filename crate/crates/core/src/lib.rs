//! Volumetric convolution engine for anisotropic separable segmentation networks.
//!
//! Everything in this crate is pure computation over in-memory buffers and builds
//! with `alloc` only. File formats, configuration files and the command line live
//! in the companion `znet` crate.
//!
//! The main pieces:
//!
//! * [`tensor`]: the dense 5-axis array `(n, h, w, d, c)` in channels-last order.
//! * [`ops`]: forward/backward kernels (convolution, transposed convolution, pooling,
//!   instance normalization, ReLU, concatenation, softmax cross-entropy) and a naive
//!   reference convolution.
//! * [`autograd`]: compiles a [`autograd::LayerSpec`] list into a [`autograd::ModelGraph`]
//!   and runs tape-based reverse mode over it.
//! * [`models`]: 3D U-Net, V-Net and their in-plane/along-depth factorized variants.
//! * [`data`], [`phantom`], [`train`], [`metrics`]: the patch pipeline, synthetic volumes,
//!   optimizer and evaluation.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape5, Tensor};
