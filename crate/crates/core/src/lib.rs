//! Spatio-temporal video frame prediction.
//!
//! Past frames are interleaved into channels and embedded as overlapping
//! patches, mixed by a stack of depthwise/pointwise convolution blocks, and
//! decoded with a parameter-free pixel shuffle followed by a 1×1 convolution.
//! Everything runs on the small tensor and autodiff core in this crate.

pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Variable};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Element, Fill, Shape, Tensor};
