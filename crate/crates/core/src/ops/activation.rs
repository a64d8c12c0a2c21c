//! Exact (erf-based) GELU.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autograd::{Op, Variable};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Standard normal CDF.
#[inline]
fn phi_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_scalar<T: Element>(x: T) -> T {
    x * phi_cdf(x)
}

#[inline]
fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(1.0 / (2.0 * PI).sqrt());
    phi_cdf(x) + x * pdf
}

pub fn gelu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

struct GeluOp;

impl<T: Element> Op<T> for GeluOp {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.zip_map(inputs[0], "gelu", |g, x| g * gelu_grad_scalar(x))?)])
    }
}

pub fn gelu<T: Element>(x: &Variable<T>) -> Result<Variable<T>> {
    let value = gelu_forward(&x.value());
    x.tape().record(Box::new(GeluOp), &[x], value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x={x}");
        }
    }
}
