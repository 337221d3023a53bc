//! Multi-scale 3D token-aggregation attention for volumetric brain-tumor
//! segmentation, built on a small dense tensor engine with reverse-mode
//! gradients.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the two supported precisions.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use attention::{HeadSplit, ScalePair, Tmcm, Tmmm, Tmsm, TokenGrid, ValueEnhance};
pub use autograd::{Gradients, Tape, Var};
pub use data::{MaskVolume, Volume};
pub use error::{Error, Result};
pub use loss::{RegionMask, SupervisionWeights};
pub use network::{Model, ModelConfig, StageOutputs};
pub use nn::{Ctx, Mode, ParamStore};
pub use ops::conv::ConvSpec;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
