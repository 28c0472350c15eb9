//! Minimal CPU network layers with input-gradient backpropagation.
//!
//! Backbones are frozen in this toolkit, so layers only propagate gradients
//! to their inputs (needed by FGSM); parameter gradients exist only for the
//! linear head, which lives in [`crate::model`].

mod backbone;
pub(crate) mod gemm;
mod layers;
mod tensor;

pub use backbone::{Backbone, BackboneId, BackboneSpec, BackboneTrace};
pub use layers::{ChannelAffine, Conv2d, Layer, MaxPool, Residual};
pub use tensor::Tensor;
