//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable-by-default, reference-counted buffer plus a
//! [`Shape`]. Cloning is cheap; mutation goes through [`Tensor::data_mut`],
//! which copies the buffer only when it is shared.

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maximum supported rank.
pub const MAX_RANK: usize = 5;

/// Buffers shorter than this are processed on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Floating-point scalar usable as tensor storage.
///
/// Implemented for `f32` (training) and `f64` (gradient checking).
pub trait Element:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Ordered list of positive extents, at most [`MAX_RANK`] long.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape(dims.to_vec(), "rank must be at least 1"));
        }
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidShape(dims.to_vec(), "rank exceeds 5"));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims.to_vec(), "extents must be positive"));
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.0.len() {
            return Err(Error::InvalidArgument(format!(
                "index of rank {} into shape {:?}",
                index.len(),
                self.0
            )));
        }
        let mut flat = 0;
        for (axis, (&i, &extent)) in index.iter().zip(&self.0).enumerate() {
            if i >= extent {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of bounds for axis {axis} of extent {extent}"
                )));
            }
            flat = flat * extent + i;
        }
        Ok(flat)
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// How to fill a freshly created tensor.
#[derive(Debug, Clone)]
pub enum Fill<'a, T> {
    Scalar(T),
    Values(&'a [T]),
    Uniform { low: f64, high: f64, seed: u64 },
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Axes selection for [`Tensor::reduce`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    List(Vec<usize>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn create(dims: &[usize], fill: Fill<'_, T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data = match fill {
            Fill::Scalar(v) => vec![v; n],
            Fill::Values(values) => {
                if values.len() != n {
                    return Err(Error::LengthMismatch {
                        shape: dims.to_vec(),
                        expected: n,
                        actual: values.len(),
                    });
                }
                values.to_vec()
            }
            Fill::Uniform { low, high, seed } => {
                let dist = Uniform::new(low, high)
                    .map_err(|e| Error::InvalidArgument(format!("uniform({low}, {high}): {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            Fill::Normal { mean, std, seed } => {
                let dist = Normal::new(mean, std)
                    .map_err(|e| Error::InvalidArgument(format!("normal({mean}, {std}): {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                shape: dims.to_vec(),
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor from a buffer whose length is known to match.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::create(dims, Fill::Scalar(T::ZERO))
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::create(dims, Fill::Scalar(T::ONE))
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        Self::create(dims, Fill::Scalar(value))
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Shape(vec![1]), vec![value])
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![T::ZERO; self.len()])
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer first if another tensor shares it.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.shape.flat_index(index)?])
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::NonScalar(self.dims().to_vec()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::ReshapeMismatch {
                from: self.dims().to_vec(),
                to: dims.to_vec(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        let data = if self.len() >= PAR_THRESHOLD {
            self.data.par_iter().map(|&v| f(v)).collect()
        } else {
            self.data.iter().map(|&v| f(v)).collect()
        };
        Self::from_parts(self.shape.clone(), data)
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T + Sync) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            });
        }
        let data = if self.len() >= PAR_THRESHOLD {
            self.data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect()
        } else {
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    /// Elementwise binary op. A one-element operand on either side is
    /// treated as a scalar; otherwise shapes must match exactly.
    pub fn elementwise(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        let f = match op {
            BinaryOp::Add => |a: T, b: T| a + b,
            BinaryOp::Sub => |a: T, b: T| a - b,
            BinaryOp::Mul => |a: T, b: T| a * b,
        };
        if self.shape != other.shape {
            if other.len() == 1 {
                let s = other.data[0];
                return Ok(self.map(|a| f(a, s)));
            }
            if self.len() == 1 {
                let s = self.data[0];
                return Ok(other.map(|b| f(s, b)));
            }
        }
        self.zip_map(other, op_name(op), f)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            });
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_f64(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::ZERO, |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum or mean over `axes`; reduced axes are dropped from the result.
    /// Reducing every axis yields shape `[1]`; an empty axis list is a no-op.
    pub fn reduce(&self, op: ReduceOp, axes: &Axes) -> Result<Self> {
        let rank = self.shape.rank();
        let mut reduced = vec![false; rank];
        match axes {
            Axes::All => reduced.iter_mut().for_each(|r| *r = true),
            Axes::List(list) => {
                for &axis in list {
                    if axis >= rank {
                        return Err(Error::AxisOutOfRange { axis, rank });
                    }
                    reduced[axis] = true;
                }
            }
        }
        if !reduced.contains(&true) {
            return Ok(self.clone());
        }

        let dims = self.dims();
        let mut out_dims: Vec<usize> = dims
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = dims
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        let out_shape = Shape::new(&out_dims)?;

        // Output strides expressed per input axis (0 for reduced axes).
        let mut out_strides = vec![0; rank];
        let mut stride = 1;
        for axis in (0..rank).rev() {
            if !reduced[axis] {
                out_strides[axis] = stride;
                stride *= dims[axis];
            }
        }

        let mut out = vec![T::ZERO; out_shape.numel()];
        let mut index = vec![0usize; rank];
        for &v in self.data.iter() {
            let o: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            out[o] += v;
            for axis in (0..rank).rev() {
                index[axis] += 1;
                if index[axis] < dims[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let inv = T::from_f64(count as f64);
            out.iter_mut().for_each(|v| *v = *v / inv);
        }
        Ok(Self::from_parts(out_shape, out))
    }

    pub fn sum(&self, axes: &Axes) -> Result<Self> {
        self.reduce(ReduceOp::Sum, axes)
    }

    pub fn mean(&self, axes: &Axes) -> Result<Self> {
        self.reduce(ReduceOp::Mean, axes)
    }

    /// Bitwise equality of shape and contents (distinguishes `-0.0` and NaN payloads).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        if self.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn create_zero_fill() {
        let t = Tensor::<f32>::create(&[2, 3], Fill::Scalar(0.0)).unwrap();
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
    }

    #[test]
    fn create_is_row_major() {
        let t = Tensor::<f32>::create(&[2, 2], Fill::Values(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(t.get(&[1, 0]).unwrap(), 3.0);
    }

    #[test]
    fn create_rejects_length_mismatch() {
        let err = Tensor::<f32>::create(&[2, 2], Fill::Values(&[1.0, 2.0, 3.0])).unwrap_err();
        match err {
            Error::LengthMismatch {
                expected, actual, ..
            } => assert_eq!((expected, actual), (4, 3)),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn seeded_fill_is_reproducible() {
        let fill = Fill::Uniform {
            low: -1.0,
            high: 1.0,
            seed: 7,
        };
        let a = Tensor::<f32>::create(&[4], fill.clone()).unwrap();
        let b = Tensor::<f32>::create(&[4], fill).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn shape_rejects_bad_extents() {
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[2, 0]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn reshape_cases() {
        let t = Tensor::<f32>::from_vec(&[1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = t.reshape(&[2, 2]).unwrap();
        assert_eq!(r.get(&[1, 1]).unwrap(), 3.0);

        let big = Tensor::<f32>::create(
            &[2, 10, 1, 8, 8],
            Fill::Uniform {
                low: 0.0,
                high: 1.0,
                seed: 1,
            },
        )
        .unwrap();
        let flat = big.reshape(&[2, 10, 64]).unwrap();
        assert_eq!(flat.data(), big.data());
        assert_eq!(
            big.get(&[1, 3, 0, 2, 5]).unwrap(),
            flat.get(&[1, 3, 2 * 8 + 5]).unwrap()
        );

        let six = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(six.reshape(&[7]), Err(Error::ReshapeMismatch { .. })));
    }

    #[test]
    fn elementwise_cases() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.mul(&Tensor::scalar(0.0)).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(a.sub(&a).unwrap().data(), &[0.0, 0.0]);
        let c = Tensor::<f32>::zeros(&[3]).unwrap();
        assert!(matches!(a.add(&c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_cases() {
        let v = Tensor::<f64>::from_vec(&[3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(v.mean(&Axes::All).unwrap().item().unwrap(), 4.0);

        let m = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = m.sum(&Axes::List(vec![0])).unwrap();
        assert_eq!(s.dims(), &[2]);
        assert_eq!(s.data(), &[4.0, 6.0]);
        let s1 = m.sum(&Axes::List(vec![1])).unwrap();
        assert_eq!(s1.data(), &[3.0, 7.0]);

        let id = m.mean(&Axes::List(vec![])).unwrap();
        assert!(id.bitwise_eq(&m));

        assert!(matches!(
            m.sum(&Axes::List(vec![2])),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_middle_axes() {
        let t = Tensor::<f64>::from_vec(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let s = t.sum(&Axes::List(vec![0, 2])).unwrap();
        // Axis-1 slices: {0,1,6,7}, {2,3,8,9}, {4,5,10,11}
        assert_eq!(s.data(), &[14.0, 22.0, 30.0]);
    }

    fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=MAX_RANK)
    }

    proptest! {
        #[test]
        fn flat_index_matches_strides(dims in dims_strategy(), seed in any::<u64>()) {
            let shape = Shape::new(&dims).unwrap();
            let strides = shape.strides();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let index: Vec<usize> = dims
                .iter()
                .map(|&d| rand::Rng::random_range(&mut rng, 0..d))
                .collect();
            let by_strides: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
            prop_assert_eq!(shape.flat_index(&index).unwrap(), by_strides);
        }

        #[test]
        fn reshape_round_trip_and_commutes(dims in dims_strategy(), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let a = Tensor::<f64>::create(&dims, Fill::Uniform { low: -1.0, high: 1.0, seed }).unwrap();
            let b = Tensor::<f64>::create(&dims, Fill::Normal { mean: 0.0, std: 1.0, seed: seed ^ 1 }).unwrap();
            let flat = a.reshape(&[n]).unwrap();
            prop_assert!(flat.reshape(&dims).unwrap().bitwise_eq(&a));

            let applied = a.mul(&b).unwrap().reshape(&[n]).unwrap();
            let reshaped = a.reshape(&[n]).unwrap().mul(&b.reshape(&[n]).unwrap()).unwrap();
            prop_assert!(applied.bitwise_eq(&reshaped));
        }
    }
}
