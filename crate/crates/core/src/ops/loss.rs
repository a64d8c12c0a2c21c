//! Training losses reduced to a per-element mean.

use crate::autograd::{Op, Variable};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

struct LossOp<T: Element> {
    kind: LossKind,
    target: Tensor<T>,
}

impl<T: Element> Op<T> for LossOp<T> {
    fn name(&self) -> &'static str {
        match self.kind {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let scale = g.item()? / T::from_f64(inputs[0].len() as f64);
        let two = T::from_f64(2.0);
        let grad = match self.kind {
            LossKind::Mse => inputs[0].zip_map(&self.target, "mse", |p, t| two * (p - t) * scale)?,
            LossKind::Mae => inputs[0].zip_map(&self.target, "mae", |p, t| {
                let d = p - t;
                if d > T::ZERO {
                    scale
                } else if d < T::ZERO {
                    -scale
                } else {
                    T::ZERO
                }
            })?,
        };
        Ok(vec![Some(grad)])
    }
}

pub fn loss_value<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossKind) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: pred.dims().to_vec(),
            rhs: target.dims().to_vec(),
        });
    }
    let sum: T = match kind {
        LossKind::Mse => pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum(),
        LossKind::Mae => pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum(),
    };
    Ok(sum / T::from_f64(pred.len() as f64))
}

pub fn loss<T: Element>(pred: &Variable<T>, target: &Tensor<T>, kind: LossKind) -> Result<Variable<T>> {
    let value = Tensor::scalar(loss_value(&pred.value(), target, kind)?);
    let op = LossOp {
        kind,
        target: target.clone(),
    };
    pred.tape().record(Box::new(op), &[pred], value)
}

pub fn mse<T: Element>(pred: &Variable<T>, target: &Tensor<T>) -> Result<Variable<T>> {
    loss(pred, target, LossKind::Mse)
}

pub fn mae<T: Element>(pred: &Variable<T>, target: &Tensor<T>) -> Result<Variable<T>> {
    loss(pred, target, LossKind::Mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn zero_when_equal() {
        let t = Tensor::<f64>::from_vec(&[3], vec![0.1, 0.5, 0.9]).unwrap();
        assert_eq!(loss_value(&t, &t, LossKind::Mse).unwrap(), 0.0);
        assert_eq!(loss_value(&t, &t, LossKind::Mae).unwrap(), 0.0);
    }

    #[test]
    fn ones_vs_zeros() {
        let p = Tensor::<f64>::ones(&[2, 3]).unwrap();
        let t = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert_eq!(loss_value(&p, &t, LossKind::Mse).unwrap(), 1.0);
        assert_eq!(loss_value(&p, &t, LossKind::Mae).unwrap(), 1.0);
    }

    #[test]
    fn mse_gradient_is_analytic() {
        let tape = Tape::<f64>::new();
        let pv = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let tv = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.5, -1.0]).unwrap();
        let p = tape.leaf(pv.clone(), true);
        mse(&p, &tv).unwrap().backward().unwrap();
        let g = p.grad().unwrap();
        for i in 0..4 {
            let expected = 2.0 * (pv.data()[i] - tv.data()[i]) / 4.0;
            assert!((g.data()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::zeros(&[3]).unwrap(), true);
        assert!(mse(&p, &Tensor::zeros(&[4]).unwrap()).is_err());
    }
}
