//! Per-channel batch normalization over (B, H, W).

use rayon::prelude::*;

use crate::autograd::{Op, Variable};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer. The affine parameters live
/// alongside as ordinary tensors so they can be put on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Element> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::ones(&[channels])?,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct NormContext<T: Element> {
    /// Normalized input, same shape as the input.
    pub x_hat: Tensor<T>,
    /// 1 / sqrt(var + eps) per channel.
    pub inv_std: Vec<T>,
}

fn check_shapes<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<(usize, usize, usize)> {
    let &[b, c, h, w] = x.dims() else {
        return Err(Error::BatchNorm(format!("input must be NCHW, got {:?}", x.dims())));
    };
    let channels = stats.channels();
    if c != channels || gamma.dims() != [channels] || beta.dims() != [channels] {
        return Err(Error::BatchNorm(format!(
            "input has {c} channels; gamma {:?}, beta {:?}, stats for {channels}",
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok((b, c, h * w))
}

/// Forward pass. In train mode the batch statistics are used and the running
/// statistics in `stats` are updated; in eval mode only running statistics are read.
pub fn batchnorm2d_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, NormContext<T>)> {
    let (batch, channels, plane) = check_shapes(x, gamma, beta, stats)?;
    if mode == Mode::Eval {
        return normalize(x, gamma, beta, stats.mean.data(), stats.var.data(), stats.eps, plane);
    }

    let n = batch * plane;
    if n < 2 {
        return Err(Error::BatchNorm(format!(
            "train mode needs at least 2 values per channel, got {n}"
        )));
    }
    let xd = x.data();
    let count = T::from_f64(n as f64);
    let (mean, var): (Vec<T>, Vec<T>) = (0..channels)
        .into_par_iter()
        .map(|c| {
            let values = || {
                (0..batch).flat_map(move |b| xd[(b * channels + c) * plane..][..plane].iter())
            };
            let mean = values().copied().sum::<T>() / count;
            let var = values().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            (mean, var)
        })
        .unzip();
    let out = normalize(x, gamma, beta, &mean, &var, stats.eps, plane)?;

    let m = T::from_f64(stats.momentum);
    let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
    for (r, &bm) in stats.mean.data_mut().iter_mut().zip(&mean) {
        *r = (T::ONE - m) * *r + m * bm;
    }
    for (r, &bv) in stats.var.data_mut().iter_mut().zip(&var) {
        *r = (T::ONE - m) * *r + m * bv * unbias;
    }
    Ok(out)
}

/// Eval-mode forward that leaves `stats` untouched.
pub fn batchnorm2d_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let (_, _, plane) = check_shapes(x, gamma, beta, stats)?;
    let (y, _) = normalize(x, gamma, beta, stats.mean.data(), stats.var.data(), stats.eps, plane)?;
    Ok(y)
}

fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
    plane: usize,
) -> Result<(Tensor<T>, NormContext<T>)> {
    let channels = mean.len();
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut x_hat = vec![T::ZERO; x.len()];
    let mut y = vec![T::ZERO; x.len()];
    x_hat
        .par_chunks_mut(plane)
        .zip(y.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(bc, (xh, out))| {
            let c = bc % channels;
            let src = &xd[bc * plane..][..plane];
            for ((h, o), &v) in xh.iter_mut().zip(out.iter_mut()).zip(src) {
                *h = (v - mean[c]) * inv_std[c];
                *o = gd[c] * *h + bd[c];
            }
        });
    Ok((
        Tensor::from_parts(x.shape().clone(), y),
        NormContext {
            x_hat: Tensor::from_parts(x.shape().clone(), x_hat),
            inv_std,
        },
    ))
}

struct BatchNormOp<T: Element> {
    ctx: NormContext<T>,
    mode: Mode,
    channels: usize,
}

impl<T: Element> Op<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(
        &self,
        grad_output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let gamma = inputs[1].data();
        let dy = grad_output.data();
        let xh = self.ctx.x_hat.data();
        let dims = grad_output.dims();
        let (batch, channels, plane) = (dims[0], self.channels, dims[2] * dims[3]);
        let n = T::from_f64((batch * plane) as f64);

        let mut sum_dy = vec![T::ZERO; channels];
        let mut sum_dy_xh = vec![T::ZERO; channels];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    sum_dy[c] += dy[i];
                    sum_dy_xh[c] += dy[i] * xh[i];
                }
            }
        }

        let mut dx = vec![T::ZERO; dy.len()];
        dx.par_chunks_mut(plane).enumerate().for_each(|(bc, out)| {
            let c = bc % channels;
            let off = bc * plane;
            let scale = gamma[c] * self.ctx.inv_std[c];
            match self.mode {
                Mode::Train => {
                    let k = scale / n;
                    for (j, o) in out.iter_mut().enumerate() {
                        let i = off + j;
                        *o = k * (n * dy[i] - sum_dy[c] - xh[i] * sum_dy_xh[c]);
                    }
                }
                Mode::Eval => {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = scale * dy[off + j];
                    }
                }
            }
        });

        let shape = inputs[1].shape().clone();
        Ok(vec![
            Some(Tensor::from_parts(grad_output.shape().clone(), dx)),
            Some(Tensor::from_parts(shape.clone(), sum_dy_xh)),
            Some(Tensor::from_parts(shape, sum_dy)),
        ])
    }
}

/// Records batch normalization on the tape of `x`.
pub fn batchnorm2d<T: Element>(
    x: &Variable<T>,
    gamma: &Variable<T>,
    beta: &Variable<T>,
    stats: &mut RunningStats<T>,
    mode: Mode,
) -> Result<Variable<T>> {
    x.check_same_tape(gamma)?;
    x.check_same_tape(beta)?;
    let (y, ctx) = batchnorm2d_forward(&x.value(), &gamma.value(), &beta.value(), stats, mode)?;
    let op = BatchNormOp {
        ctx,
        mode,
        channels: stats.channels(),
    };
    x.tape().record(Box::new(op), &[x, gamma, beta], y)
}
