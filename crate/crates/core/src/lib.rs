//! End-to-end stereo disparity regression.
//!
//! Shared convolutional feature towers embed both images, a concatenation
//! cost volume pairs every left feature with right features at each
//! candidate disparity, a 3-D convolutional encoder-decoder regularizes the
//! volume, and a soft argmin turns the final costs into sub-pixel disparity.
//! Everything runs on a small reverse-mode autodiff engine in this crate.

pub mod autograd;
pub mod conv;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod model;
pub mod nn;
pub mod sample;
pub mod stereo;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, NodeId};
pub use conv::ConvSpec;
pub use error::{Error, Result};
pub use model::{GcNet, ModelConfig, Variant};
pub use sample::StereoSample;
pub use stereo::LossKind;
pub use tensor::{DType, Scalar, Tensor};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub mod tensors {}
    #[doc = include_str!("../../../book/src/cost-volume.md")]
    pub mod cost_volume {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/gradcheck.md")]
    pub mod gradcheck {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
