use log::warn;

use crate::autograd::Variable;
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm2d, batchnorm2d_infer, conv2d, conv2d_forward, gelu, gelu_forward, pixel_shuffle,
    pixel_shuffle_forward, residual_add, Conv2dSpec, Mode, Padding, RunningStats,
};
use crate::tensor::{Element, Tensor};

use super::config::ModelConfig;
use super::init;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Element> {
    pub spec: Conv2dSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    fn zeros(spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            weight: Tensor::zeros(&spec.weight_dims())?,
            bias: if spec.has_bias {
                Some(Tensor::zeros(&[spec.out_channels])?)
            } else {
                None
            },
            spec,
        })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, self.bias.as_ref(), &self.spec)
    }

    fn record(&self, x: &Variable<T>, params: &mut ParamCursor<'_, T>) -> Result<Variable<T>> {
        let w = params.next()?;
        let b = if self.spec.has_bias { Some(params.next()?) } else { None };
        conv2d(x, w, b, &self.spec)
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b));
        }
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Element> BatchNorm2d<T> {
    fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            stats: RunningStats::new(channels)?,
        })
    }

    /// gamma = 1, beta = 0, running mean = 0, running var = 1.
    pub fn reset(&mut self) -> Result<()> {
        *self = Self::new(self.gamma.len())?;
        Ok(())
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm2d_infer(x, &self.gamma, &self.beta, &self.stats)
    }

    fn record(&mut self, x: &Variable<T>, params: &mut ParamCursor<'_, T>, mode: Mode) -> Result<Variable<T>> {
        let gamma = params.next()?;
        let beta = params.next()?;
        batchnorm2d(x, gamma, beta, &mut self.stats, mode)
    }

    fn push_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn push_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn push_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.running_mean"), &self.stats.mean));
        out.push((format!("{prefix}.running_var"), &self.stats.var));
    }

    fn push_buffers_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.stats.mean);
        out.push(&mut self.stats.var);
    }

    fn split_mut<'a>(
        &'a mut self,
        params: &mut Vec<&'a mut Tensor<T>>,
        buffers: &mut Vec<&'a mut Tensor<T>>,
    ) {
        params.push(&mut self.gamma);
        params.push(&mut self.beta);
        buffers.push(&mut self.stats.mean);
        buffers.push(&mut self.stats.var);
    }
}

/// One mixer block: a residual depthwise stage followed by a pointwise stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerBlock<T: Element> {
    pub local: Conv2d<T>,
    pub dilated: Conv2d<T>,
    pub spatial_norm: BatchNorm2d<T>,
    pub pointwise: Conv2d<T>,
    pub channel_norm: BatchNorm2d<T>,
}

impl<T: Element> MixerBlock<T> {
    fn new(config: &ModelConfig) -> Result<Self> {
        let d = config.hidden;
        Ok(Self {
            local: Conv2d::zeros(Conv2dSpec::depthwise(d, config.kernel_local, 1))?,
            dilated: Conv2d::zeros(Conv2dSpec::depthwise(d, config.kernel_global, config.dilation))?,
            spatial_norm: BatchNorm2d::new(d)?,
            pointwise: Conv2d::zeros(Conv2dSpec::new(d, d, 1))?,
            channel_norm: BatchNorm2d::new(d)?,
        })
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.local.infer(x)?;
        let h = self.dilated.infer(&h)?;
        let h = self.spatial_norm.infer(&gelu_forward(&h))?;
        let x = h.add(x)?;
        let h = self.pointwise.infer(&x)?;
        self.channel_norm.infer(&gelu_forward(&h))
    }

    fn record(&mut self, x: &Variable<T>, params: &mut ParamCursor<'_, T>, mode: Mode) -> Result<Variable<T>> {
        let h = self.local.record(x, params)?;
        let h = self.dilated.record(&h, params)?;
        let h = self.spatial_norm.record(&gelu(&h)?, params, mode)?;
        let x = residual_add(x, &h)?;
        let h = self.pointwise.record(&x, params)?;
        self.channel_norm.record(&gelu(&h)?, params, mode)
    }
}

/// Observable events of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    /// The activation entering this block was stored for the long skip.
    SkipStore { before_block: usize },
    /// The stored activation was added to the activation entering this block.
    SkipAdd { before_block: usize },
    Block(usize),
}

/// The assembled network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    pub encoder_conv: Conv2d<T>,
    pub encoder_norm: BatchNorm2d<T>,
    pub blocks: Vec<MixerBlock<T>>,
    pub reassemble: Conv2d<T>,
}

/// Hands out parameter variables in enumeration order.
struct ParamCursor<'a, T: Element> {
    params: &'a [Variable<T>],
    next: usize,
}

impl<'a, T: Element> ParamCursor<'a, T> {
    fn next(&mut self) -> Result<&'a Variable<T>> {
        let v = self.params.get(self.next).ok_or_else(|| {
            Error::InvalidArgument(format!("model needs more than {} parameters", self.params.len()))
        })?;
        self.next += 1;
        Ok(v)
    }
}

impl<T: Element> Model<T> {
    /// Builds the network and initializes it with [`init::init_weights`].
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        init::init_weights(&mut model, seed);
        Ok(model)
    }

    /// Builds the network with zero convolution weights and identity norms.
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.skip_schedule().is_none() {
            warn!(
                "depth {} < 3: building without the long skip connection",
                config.depth
            );
        }
        let enc = config.encoder();
        let encoder_spec = Conv2dSpec::new(config.in_channels(), config.hidden, enc.kernel)
            .with_stride(enc.stride)
            .with_padding(Padding::Explicit(enc.padding));
        let blocks = (0..config.depth)
            .map(|_| MixerBlock::new(&config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            encoder_conv: Conv2d::zeros(encoder_spec)?,
            encoder_norm: BatchNorm2d::new(config.hidden)?,
            blocks,
            reassemble: Conv2d::zeros(Conv2dSpec::new(
                config.shuffled_channels(),
                config.out_channels(),
                1,
            ))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learnable tensors in stable order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder_conv.push_params("encoder.conv", &mut out);
        self.encoder_norm.push_params("encoder.norm", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.local.push_params(&format!("blocks.{i}.local"), &mut out);
            b.dilated.push_params(&format!("blocks.{i}.dilated"), &mut out);
            b.spatial_norm.push_params(&format!("blocks.{i}.spatial_norm"), &mut out);
            b.pointwise.push_params(&format!("blocks.{i}.pointwise"), &mut out);
            b.channel_norm.push_params(&format!("blocks.{i}.channel_norm"), &mut out);
        }
        self.reassemble.push_params("decoder.reassemble", &mut out);
        out
    }

    /// Same order as [`Model::named_parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.encoder_conv.push_params_mut(&mut out);
        self.encoder_norm.push_params_mut(&mut out);
        for b in &mut self.blocks {
            b.local.push_params_mut(&mut out);
            b.dilated.push_params_mut(&mut out);
            b.spatial_norm.push_params_mut(&mut out);
            b.pointwise.push_params_mut(&mut out);
            b.channel_norm.push_params_mut(&mut out);
        }
        self.reassemble.push_params_mut(&mut out);
        out
    }

    /// Batch-norm running statistics in stable order.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.encoder_norm.push_buffers("encoder.norm", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.spatial_norm.push_buffers(&format!("blocks.{i}.spatial_norm"), &mut out);
            b.channel_norm.push_buffers(&format!("blocks.{i}.channel_norm"), &mut out);
        }
        out
    }

    /// Same order as [`Model::named_buffers`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.encoder_norm.push_buffers_mut(&mut out);
        for b in &mut self.blocks {
            b.spatial_norm.push_buffers_mut(&mut out);
            b.channel_norm.push_buffers_mut(&mut out);
        }
        out
    }

    /// Parameters followed by buffers; everything a checkpoint stores.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.named_parameters();
        out.extend(self.named_buffers());
        out
    }

    /// Same order as [`Model::state`].
    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.encoder_conv.push_params_mut(&mut params);
        self.encoder_norm.split_mut(&mut params, &mut buffers);
        for b in &mut self.blocks {
            b.local.push_params_mut(&mut params);
            b.dilated.push_params_mut(&mut params);
            b.spatial_norm.split_mut(&mut params, &mut buffers);
            b.pointwise.push_params_mut(&mut params);
            b.channel_norm.split_mut(&mut params, &mut buffers);
        }
        self.reassemble.push_params_mut(&mut params);
        params.extend(buffers);
        params
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            spec: c.spec,
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(Tensor::cast),
        };
        let norm = |n: &BatchNorm2d<T>| BatchNorm2d {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
            stats: RunningStats {
                mean: n.stats.mean.cast(),
                var: n.stats.var.cast(),
                eps: n.stats.eps,
                momentum: n.stats.momentum,
            },
        };
        Model {
            config: self.config,
            encoder_conv: conv(&self.encoder_conv),
            encoder_norm: norm(&self.encoder_norm),
            blocks: self
                .blocks
                .iter()
                .map(|b| MixerBlock {
                    local: conv(&b.local),
                    dilated: conv(&b.dilated),
                    spatial_norm: norm(&b.spatial_norm),
                    pointwise: conv(&b.pointwise),
                    channel_norm: norm(&b.channel_norm),
                })
                .collect(),
            reassemble: conv(&self.reassemble),
        }
    }

    fn expected_input(&self, batch: usize) -> [usize; 5] {
        let c = &self.config;
        [batch, c.t_in, c.channels, c.height, c.width]
    }

    fn check_input(&self, dims: &[usize]) -> Result<usize> {
        let batch = dims.first().copied().unwrap_or(0);
        let expected = self.expected_input(batch.max(1));
        if dims != expected {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: dims.to_vec(),
                rhs: expected.to_vec(),
            });
        }
        Ok(batch)
    }

    /// Eval-mode inference without recording: `[B, T, C, H, W] → [B, T', C, H, W]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x.dims())?;
        let c = self.config;
        let x = x.reshape(&[batch, c.in_channels(), c.height, c.width])?;
        let mut h = gelu_forward(&self.encoder_norm.infer(&self.encoder_conv.infer(&x)?)?);
        let skip = c.skip_schedule();
        let mut stored = None;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some((store, add)) = skip {
                if i == store {
                    stored = Some(h.clone());
                }
                if i == add {
                    h = h.add(stored.as_ref().expect("store precedes add"))?;
                }
            }
            h = block.infer(&h)?;
        }
        let h = pixel_shuffle_forward(&h, c.patch)?;
        let y = self.reassemble.infer(&h)?;
        y.reshape(&[batch, c.t_out, c.channels, c.height, c.width])
    }

    /// Recording forward pass. Registers every parameter as a leaf on the
    /// tape of `x` and returns the output with those leaves, in
    /// [`Model::named_parameters`] order.
    pub fn forward(&mut self, x: &Variable<T>, mode: Mode) -> Result<(Variable<T>, Vec<Variable<T>>)> {
        let tape = x.tape().clone();
        let params: Vec<Variable<T>> = self
            .named_parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        let y = self.forward_with(x, &params, mode, None)?;
        Ok((y, params))
    }

    /// Recording forward pass with caller-supplied parameter variables.
    pub fn forward_with(
        &mut self,
        x: &Variable<T>,
        params: &[Variable<T>],
        mode: Mode,
        mut trace: Option<&mut Vec<TraceEvent>>,
    ) -> Result<Variable<T>> {
        let batch = self.check_input(&x.dims())?;
        let c = self.config;
        let mut cursor = ParamCursor { params, next: 0 };

        let x = x.reshape(&[batch, c.in_channels(), c.height, c.width])?;
        let h = self.encoder_conv.record(&x, &mut cursor)?;
        let mut h = gelu(&self.encoder_norm.record(&h, &mut cursor, mode)?)?;

        let skip = c.skip_schedule();
        let mut stored: Option<Variable<T>> = None;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            if let Some((store, add)) = skip {
                if i == store {
                    stored = Some(h.clone());
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(TraceEvent::SkipStore { before_block: i });
                    }
                }
                if i == add {
                    h = h.add(stored.as_ref().expect("store precedes add"))?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(TraceEvent::SkipAdd { before_block: i });
                    }
                }
            }
            h = block.record(&h, &mut cursor, mode)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceEvent::Block(i));
            }
        }

        let h = pixel_shuffle(&h, c.patch)?;
        let y = self.reassemble.record(&h, &mut cursor)?;
        if cursor.next != params.len() {
            return Err(Error::InvalidArgument(format!(
                "model consumed {} of {} parameters",
                cursor.next,
                params.len()
            )));
        }
        y.reshape(&[batch, c.t_out, c.channels, c.height, c.width])
    }

    /// Encoder output for a `[B, T, C, H, W]` input (eval mode).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.check_input(x.dims())?;
        let c = self.config;
        let x = x.reshape(&[batch, c.in_channels(), c.height, c.width])?;
        Ok(gelu_forward(&self.encoder_norm.infer(&self.encoder_conv.infer(&x)?)?))
    }
}
