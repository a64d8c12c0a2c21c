//! Differentiable neural-network operations.
//!
//! Each op comes in two layers: a `*_forward` function on plain tensors used
//! for inference, and a recording wrapper on [`Variable`]s used for training.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod loss;
pub mod shuffle;

pub use activation::{gelu, gelu_forward};
pub use batchnorm::{batchnorm2d, batchnorm2d_forward, batchnorm2d_infer, Mode, RunningStats};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, Conv2dSpec, Padding};
pub use loss::{loss, loss_value, mae, mse, LossKind};
pub use shuffle::{pixel_shuffle, pixel_shuffle_forward, pixel_unshuffle_forward};

use crate::autograd::Variable;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// `x + fx`, with the gradient flowing through both branches.
pub fn residual_add<T: Element>(x: &Variable<T>, fx: &Variable<T>) -> Result<Variable<T>> {
    if x.dims() != fx.dims() {
        return Err(Error::ShapeMismatch {
            op: "residual_add",
            lhs: x.dims(),
            rhs: fx.dims(),
        });
    }
    fx.add(x)
}
