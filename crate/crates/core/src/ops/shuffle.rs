//! Pixel shuffle: `[B, C·r², H, W] → [B, C, H·r, W·r]` and its inverse.

use crate::autograd::{Op, Variable};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

fn nchw(dims: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *dims {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::InvalidArgument(format!("{op} expects NCHW, got {dims:?}"))),
    }
}

/// `out[b, c, h·r+i, w·r+j] = in[b, c·r² + i·r + j, h, w]`
pub fn pixel_shuffle_forward<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, cr2, h, w] = nchw(x.dims(), "pixel_shuffle")?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_shuffle: {cr2} channels not divisible by {r}²"
        )));
    }
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = ci * r * r + i * r + j;
                    let in_plane = &src[(bi * cr2 + ic) * h * w..][..h * w];
                    let out_plane = &mut out[(bi * c + ci) * oh * ow..][..oh * ow];
                    for y in 0..h {
                        let row = &mut out_plane[(y * r + i) * ow..][..ow];
                        for x in 0..w {
                            row[x * r + j] = in_plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[b, c, oh, ow])?, out))
}

/// Inverse of [`pixel_shuffle_forward`].
pub fn pixel_unshuffle_forward<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = nchw(x.dims(), "pixel_unshuffle")?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel_unshuffle: {oh}x{ow} not divisible by {r}"
        )));
    }
    let (h, w, cr2) = (oh / r, ow / r, c * r * r);
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            let in_plane = &src[(bi * c + ci) * oh * ow..][..oh * ow];
            for i in 0..r {
                for j in 0..r {
                    let oc = ci * r * r + i * r + j;
                    let out_plane = &mut out[(bi * cr2 + oc) * h * w..][..h * w];
                    for y in 0..h {
                        for x in 0..w {
                            out_plane[y * w + x] = in_plane[(y * r + i) * ow + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(&[b, cr2, h, w])?, out))
}

struct ShuffleOp {
    r: usize,
}

impl<T: Element> Op<T> for ShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pixel_unshuffle_forward(g, self.r)?)])
    }
}

pub fn pixel_shuffle<T: Element>(x: &Variable<T>, r: usize) -> Result<Variable<T>> {
    let value = pixel_shuffle_forward(&x.value(), r)?;
    x.tape().record(Box::new(ShuffleOp { r }), &[x], value)
}
