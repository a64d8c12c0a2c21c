//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Forward values are computed eagerly when an operation is recorded. A call
//! to [`Variable::backward`] walks the tape in reverse insertion order and
//! *accumulates* gradients into every reachable node that requires them;
//! [`Tape::zero_grad`] resets the accumulators.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Backward rule of a recorded operation.
///
/// `backward` receives the upstream gradient, the forward values of the
/// inputs (in recording order) and the forward output, and returns one
/// optional gradient per input.
pub trait Op<T: Element> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad_output: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Option<Box<dyn Op<T>>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

struct TapeInner<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recorded_ops: usize,
}

/// An operation tape. Cheap to clone; clones share the same record.
pub struct Tape<T: Element = f32> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                recorded_ops: 0,
            })),
        }
    }

    fn push(&self, node: Node<T>) -> Variable<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if node.op.is_some() {
            inner.recorded_ops += 1;
        }
        inner.nodes.push(node);
        inner.grads.push(None);
        Variable {
            tape: self.clone(),
            id,
        }
    }

    /// Registers an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Variable<T> {
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Variable<T> {
        self.leaf(value, false)
    }

    /// Appends an operation whose forward `value` has already been computed.
    /// The output requires a gradient iff any input does.
    pub fn record(
        &self,
        op: Box<dyn Op<T>>,
        inputs: &[&Variable<T>],
        value: Tensor<T>,
    ) -> Result<Variable<T>> {
        let mut ids = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        {
            let inner = self.inner.borrow();
            for v in inputs {
                if !Rc::ptr_eq(&v.tape.inner, &self.inner) {
                    return Err(Error::TapeMismatch);
                }
                requires_grad |= inner.nodes[v.id].requires_grad;
                ids.push(v.id);
            }
        }
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: ids,
            requires_grad,
        }))
    }

    /// Number of recorded operations (leaves are not counted).
    pub fn len(&self) -> usize {
        self.inner.borrow().recorded_ops
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&self) {
        self.inner
            .borrow_mut()
            .grads
            .iter_mut()
            .for_each(|g| *g = None);
    }

    pub fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn backward(&self, loss: &Variable<T>) -> Result<()> {
        if !Rc::ptr_eq(&loss.tape.inner, &self.inner) {
            return Err(Error::TapeMismatch);
        }
        let fresh = {
            let inner = self.inner.borrow();
            let root = &inner.nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::NonScalar(root.value.dims().to_vec()));
            }
            if !root.requires_grad {
                return Ok(());
            }

            let mut local: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
            local[loss.id] = Some(Tensor::ones(root.value.dims())?);

            for id in (0..=loss.id).rev() {
                let node = &inner.nodes[id];
                let Some(op) = node.op.as_ref() else {
                    continue;
                };
                let Some(grad) = local[id].take() else {
                    continue;
                };
                let input_values: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
                let input_grads = op.backward(&grad, &input_values, &node.value)?;
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                for (&input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !inner.nodes[input].requires_grad {
                        continue;
                    }
                    match &mut local[input] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot => *slot = Some(g),
                    }
                }
                // Keep the node's own gradient for accumulation below.
                local[id] = Some(grad);
            }
            local
        };

        let mut inner = self.inner.borrow_mut();
        for (id, g) in fresh.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            match &mut inner.grads[id] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// A tensor registered on a [`Tape`].
pub struct Variable<T: Element = f32> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Variable<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Element> fmt::Debug for Variable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Variable")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

impl<T: Element> Variable<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.dims().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Accumulated gradient, or `None` if nothing has flowed here yet.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Accumulated gradient, materializing zeros when absent.
    pub fn grad_or_zeros(&self) -> Tensor<T> {
        self.grad().unwrap_or_else(|| self.value().zeros_like())
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    pub(crate) fn check_same_tape(&self, other: &Variable<T>) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::TapeMismatch)
        }
    }

    pub fn add(&self, other: &Variable<T>) -> Result<Variable<T>> {
        self.check_same_tape(other)?;
        let value = self.value().add(&other.value())?;
        self.tape.record(Box::new(AddOp), &[self, other], value)
    }

    pub fn sub(&self, other: &Variable<T>) -> Result<Variable<T>> {
        self.check_same_tape(other)?;
        let value = self.value().sub(&other.value())?;
        self.tape.record(Box::new(SubOp), &[self, other], value)
    }

    pub fn mul(&self, other: &Variable<T>) -> Result<Variable<T>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            });
        }
        let value = a.mul(&b)?;
        self.tape.record(Box::new(MulOp), &[self, other], value)
    }

    pub fn scale(&self, s: T) -> Result<Variable<T>> {
        let value = self.value().scale(s);
        self.tape.record(Box::new(ScaleOp(s)), &[self], value)
    }

    pub fn square(&self) -> Result<Variable<T>> {
        let value = self.value().map(|v| v * v);
        self.tape.record(Box::new(SquareOp), &[self], value)
    }

    pub fn sum(&self) -> Result<Variable<T>> {
        let value = Tensor::scalar(self.value().sum_all());
        self.tape.record(Box::new(SumOp { mean: false }), &[self], value)
    }

    pub fn mean(&self) -> Result<Variable<T>> {
        let value = Tensor::scalar(self.value().mean_all());
        self.tape.record(Box::new(SumOp { mean: true }), &[self], value)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Variable<T>> {
        let input = self.value();
        let value = input.reshape(dims)?;
        self.tape.record(
            Box::new(ReshapeOp {
                input_dims: input.dims().to_vec(),
            }),
            &[self],
            value,
        )
    }
}

struct AddOp;
struct SubOp;
struct MulOp;
struct ScaleOp<T>(T);
struct SquareOp;
struct SumOp {
    mean: bool,
}
struct ReshapeOp {
    input_dims: Vec<usize>,
}

/// Gradient w.r.t. an operand that may have been broadcast as a scalar.
fn unbroadcast<T: Element>(grad: &Tensor<T>, operand: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() == operand.shape() {
        Ok(grad.clone())
    } else {
        Tensor::scalar(grad.sum_all()).reshape(operand.dims())
    }
}

impl<T: Element> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            Some(unbroadcast(g, inputs[0])?),
            Some(unbroadcast(g, inputs[1])?),
        ])
    }
}

impl<T: Element> Op<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            Some(unbroadcast(g, inputs[0])?),
            Some(unbroadcast(&g.map(|v| -v), inputs[1])?),
        ])
    }
}

impl<T: Element> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.mul(inputs[1])?), Some(g.mul(inputs[0])?)])
    }
}

impl<T: Element> Op<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

impl<T: Element> Op<T> for SquareOp {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let two = T::from_f64(2.0);
        Ok(vec![Some(g.zip_map(inputs[0], "square", |g, x| g * two * x)?)])
    }
}

impl<T: Element> Op<T> for SumOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut upstream = g.item()?;
        if self.mean {
            upstream = upstream / T::from_f64(inputs[0].len() as f64);
        }
        Ok(vec![Some(Tensor::full(inputs[0].dims(), upstream)?)])
    }
}

impl<T: Element> Op<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.reshape(&self.input_dims)?)])
    }
}

/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Checks `f` at `point` with central differences of half-width `eps`.
pub fn gradcheck<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Variable<f64>) -> Result<Variable<f64>>,
{
    let check = gradcheck_many(|vars| f(&vars[0]), std::slice::from_ref(point), eps)?;
    Ok(check.max_rel_error)
}

/// Multi-input variant of [`gradcheck`]; every input is perturbed.
pub fn gradcheck_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&[Variable<f64>]) -> Result<Variable<f64>>,
{
    let evaluate = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        f(&vars)?.value().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = points.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&vars)?;
    if out.value().len() != 1 {
        return Err(Error::NonScalar(out.dims()));
    }
    out.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(Variable::grad_or_zeros).collect();

    let mut max_rel_error = 0.0f64;
    let mut coordinates = 0;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = work[which].data()[i];
            work[which].data_mut()[i] = original + eps;
            let plus = evaluate(&work)?;
            work[which].data_mut()[i] = original - eps;
            let minus = evaluate(&work)?;
            work[which].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            max_rel_error = max_rel_error.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        coordinates,
    })
}
