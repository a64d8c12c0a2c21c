//! Grouped, strided, dilated 2-D cross-correlation on NCHW tensors.
//!
//! Every output element accumulates its terms in the fixed order
//! (input channel, kernel row, kernel column), starting from zero, and adds
//! the bias last. The kernels below vectorize along output columns but keep
//! that per-element order, so results are reproducible regardless of how the
//! work is split across threads.

use rayon::prelude::*;

use crate::autograd::{Op, Variable};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Explicit(usize),
    /// Zero padding of `(effective_kernel - 1) / 2` on every side.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Dense convolution with stride 1, no padding, no dilation, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Explicit(0),
            dilation: 1,
            groups: 1,
            has_bias: true,
        }
    }

    /// Depthwise convolution with `same` padding.
    pub fn depthwise(channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
            dilation,
            groups: channels,
            has_bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("dilation", self.dilation),
            ("groups", self.groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Conv(format!("{name} must be positive")));
            }
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Conv(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.padding == Padding::Same && self.effective_kernel().is_multiple_of(2) {
            return Err(Error::Conv(format!(
                "same padding needs an odd effective kernel, got {}",
                self.effective_kernel()
            )));
        }
        Ok(())
    }

    pub fn padding_amount(&self) -> usize {
        match self.padding {
            Padding::Explicit(p) => p,
            Padding::Same => (self.effective_kernel() - 1) / 2,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Output extent along one spatial axis, or `None` if the kernel does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding_amount();
        let eff = self.effective_kernel();
        (padded >= eff).then(|| (padded - eff) / self.stride + 1)
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weight_dims().iter().product();
        w + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for one sample with the given output extent.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.out_channels * out_h * out_w) as u64
            * (self.in_channels / self.groups * self.kernel * self.kernel) as u64
    }
}

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn resolve<T: Element>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &Conv2dSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let &[batch, cin, h, w] = x.dims() else {
            return Err(Error::Conv(format!("input must be NCHW, got {:?}", x.dims())));
        };
        if cin != spec.in_channels {
            return Err(Error::Conv(format!(
                "input has {cin} channels, convolution expects {}",
                spec.in_channels
            )));
        }
        if weight.dims() != spec.weight_dims() {
            return Err(Error::Conv(format!(
                "weight shape {:?}, expected {:?}",
                weight.dims(),
                spec.weight_dims()
            )));
        }
        match (bias, spec.has_bias) {
            (Some(b), true) if b.dims() != [spec.out_channels] => {
                return Err(Error::Conv(format!(
                    "bias shape {:?}, expected [{}]",
                    b.dims(),
                    spec.out_channels
                )))
            }
            (None, true) => return Err(Error::Conv("convolution requires a bias".into())),
            (Some(_), false) => return Err(Error::Conv("convolution has no bias".into())),
            _ => {}
        }
        let (Some(oh), Some(ow)) = (spec.output_extent(h), spec.output_extent(w)) else {
            return Err(Error::Conv(format!(
                "effective kernel {} larger than padded input {h}x{w}",
                spec.effective_kernel()
            )));
        };
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout: spec.out_channels,
            cin_g: spec.in_channels / spec.groups,
            cout_g: spec.out_channels / spec.groups,
            k: spec.kernel,
            stride: spec.stride,
            pad: spec.padding_amount(),
            dil: spec.dilation,
            oh,
            ow,
        })
    }

    /// Output indices `o` in `[lo, hi)` for which `o*stride + offset - pad`
    /// lands inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, offset: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // Need o*stride + offset >= pad and o*stride + offset < pad + extent.
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(self.stride)
        };
        let limit = self.pad + extent;
        let hi = if limit <= offset {
            0
        } else {
            ((limit - offset).div_ceil(self.stride)).min(out_extent)
        };
        (lo.min(hi), hi)
    }
}

/// Forward pass on plain tensors.
pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::resolve(x, weight, bias, spec)?;
    let (xd, wd) = (x.data(), weight.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ksq = g.k * g.k;
    let mut out = vec![T::ZERO; g.batch * g.cout * plane_out];

    out.par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(bo, out_plane)| {
            let (b, oc) = (bo / g.cout, bo % g.cout);
            let group = oc / g.cout_g;
            for icl in 0..g.cin_g {
                let ic = group * g.cin_g + icl;
                let x_plane = &xd[(b * g.cin + ic) * plane_in..][..plane_in];
                let w_base = (oc * g.cin_g + icl) * ksq;
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.valid_range(kh * g.dil, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = wd[w_base + kh * g.k + kw];
                        let (ow_lo, ow_hi) = g.valid_range(kw * g.dil, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh * g.dil - g.pad;
                            let x_row = &x_plane[ih * g.w..][..g.w];
                            let o_row = &mut out_plane[oh * g.ow..][..g.ow];
                            let iw0 = ow_lo * g.stride + kw * g.dil - g.pad;
                            if g.stride == 1 {
                                let n = ow_hi - ow_lo;
                                for (o, &xv) in o_row[ow_lo..ow_hi].iter_mut().zip(&x_row[iw0..iw0 + n]) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in o_row[ow_lo..ow_hi].iter_mut().enumerate() {
                                    *o += wv * x_row[iw0 + j * g.stride];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[oc];
                out_plane.iter_mut().for_each(|o| *o += bv);
            }
        });

    Ok(Tensor::from_parts(
        Shape::new(&[g.batch, g.cout, g.oh, g.ow])?,
        out,
    ))
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv2dSpec,
) -> Result<ConvGrads<T>> {
    let zero_bias;
    let bias = if spec.has_bias {
        zero_bias = Tensor::zeros(&[spec.out_channels])?;
        Some(&zero_bias)
    } else {
        None
    };
    let g = Geometry::resolve(x, weight, bias, spec)?;
    if grad_out.dims() != [g.batch, g.cout, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward",
            lhs: grad_out.dims().to_vec(),
            rhs: vec![g.batch, g.cout, g.oh, g.ow],
        });
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let ksq = g.k * g.k;

    // Input gradient: each (b, ic) plane scatters from the output planes of its group.
    let mut gx = vec![T::ZERO; x.len()];
    gx.par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(bi, gx_plane)| {
            let (b, ic) = (bi / g.cin, bi % g.cin);
            let group = ic / g.cin_g;
            let icl = ic % g.cin_g;
            for ocl in 0..g.cout_g {
                let oc = group * g.cout_g + ocl;
                let g_plane = &gd[(b * g.cout + oc) * plane_out..][..plane_out];
                let w_base = (oc * g.cin_g + icl) * ksq;
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.valid_range(kh * g.dil, g.h, g.oh);
                    for kw in 0..g.k {
                        let wv = wd[w_base + kh * g.k + kw];
                        let (ow_lo, ow_hi) = g.valid_range(kw * g.dil, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh * g.dil - g.pad;
                            let g_row = &g_plane[oh * g.ow..][..g.ow];
                            let x_row = &mut gx_plane[ih * g.w..][..g.w];
                            let iw0 = ow_lo * g.stride + kw * g.dil - g.pad;
                            for (j, &gv) in g_row[ow_lo..ow_hi].iter().enumerate() {
                                x_row[iw0 + j * g.stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        });

    // Weight gradient: one output channel's slab per task.
    let slab = g.cin_g * ksq;
    let mut gw = vec![T::ZERO; weight.len()];
    gw.par_chunks_mut(slab).enumerate().for_each(|(oc, gw_slab)| {
        let group = oc / g.cout_g;
        for b in 0..g.batch {
            let g_plane = &gd[(b * g.cout + oc) * plane_out..][..plane_out];
            for icl in 0..g.cin_g {
                let ic = group * g.cin_g + icl;
                let x_plane = &xd[(b * g.cin + ic) * plane_in..][..plane_in];
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = g.valid_range(kh * g.dil, g.h, g.oh);
                    for kw in 0..g.k {
                        let (ow_lo, ow_hi) = g.valid_range(kw * g.dil, g.w, g.ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh * g.dil - g.pad;
                            let g_row = &g_plane[oh * g.ow..][..g.ow];
                            let x_row = &x_plane[ih * g.w..][..g.w];
                            let iw0 = ow_lo * g.stride + kw * g.dil - g.pad;
                            for (j, &gv) in g_row[ow_lo..ow_hi].iter().enumerate() {
                                acc += gv * x_row[iw0 + j * g.stride];
                            }
                        }
                        gw_slab[icl * ksq + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    });

    let gb = spec.has_bias.then(|| {
        let mut sums = vec![T::ZERO; g.cout];
        for b in 0..g.batch {
            for (oc, s) in sums.iter_mut().enumerate() {
                *s += gd[(b * g.cout + oc) * plane_out..][..plane_out].iter().copied().sum();
            }
        }
        Tensor::from_parts(Shape::new(&[g.cout]).expect("positive extent"), sums)
    });

    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().clone(), gx),
        weight: Tensor::from_parts(weight.shape().clone(), gw),
        bias: gb,
    })
}

struct Conv2dOp {
    spec: Conv2dSpec,
}

impl<T: Element> Op<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad_output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let grads = conv2d_backward(inputs[0], inputs[1], grad_output, &self.spec)?;
        let mut out = vec![Some(grads.input), Some(grads.weight)];
        if self.spec.has_bias {
            out.push(grads.bias);
        }
        Ok(out)
    }
}

/// Records a convolution on the tape of `x`.
pub fn conv2d<T: Element>(
    x: &Variable<T>,
    weight: &Variable<T>,
    bias: Option<&Variable<T>>,
    spec: &Conv2dSpec,
) -> Result<Variable<T>> {
    x.check_same_tape(weight)?;
    if let Some(b) = bias {
        x.check_same_tape(b)?;
    }
    let bias_value = bias.map(Variable::value);
    let value = conv2d_forward(&x.value(), &weight.value(), bias_value.as_ref(), spec)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    x.tape().record(Box::new(Conv2dOp { spec: *spec }), &inputs, value)
}
