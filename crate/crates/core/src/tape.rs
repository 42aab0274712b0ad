//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every primitive application as a node holding the
//! operation, its input node ids and the forward value. Node order is a
//! topological order of the computation graph by construction, so
//! [`Tape::backward`] is a single reverse sweep and [`Tape::replay_forward`]
//! a single forward sweep (used by finite-difference checking to re-evaluate
//! the same program under perturbed leaves).

use crate::error::{Error, Result};
use crate::tensor::{shapes, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorRef(pub(crate) usize);

/// Primitive operation descriptor. The set is closed: anything outside this
/// enum cannot be constructed, so there is no "unknown kind" at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    SumAll,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Elu {
        alpha: f64,
    },
    SoftmaxMasked {
        axis: usize,
    },
    Dropout {
        rate: f64,
        enabled: bool,
        seed: u64,
    },
    Transpose,
    Broadcast {
        shape: Vec<usize>,
    },
    ScalarMul {
        factor: f64,
    },
    MaskedMax,
    GatherRows {
        ids: Vec<usize>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        use Primitive::*;
        match self {
            MatMul => "matmul",
            Add => "add",
            Sub => "sub",
            Mul => "mul",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SumAll => "sum_all",
            Exp => "exp",
            Log => "log",
            Tanh => "tanh",
            Sigmoid => "sigmoid",
            Relu => "relu",
            Elu { .. } => "elu",
            SoftmaxMasked { .. } => "softmax_masked",
            Dropout { .. } => "dropout",
            Transpose => "transpose",
            Broadcast { .. } => "broadcast",
            ScalarMul { .. } => "scalar_mul",
            MaskedMax => "masked_max",
            GatherRows { .. } => "gather_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        use Primitive::*;
        match self {
            Concat { .. } => None, // variadic
            MatMul | Add | Sub | Mul | SoftmaxMasked { .. } | MaskedMax => Some(2),
            _ => Some(1),
        }
    }
}

// Recorded operation: the primitive plus whatever forward state backward
// needs (dropout keep mask, argmax rows).
#[derive(Clone, Debug)]
enum OpRecord<T> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    SumAll,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Elu {
        alpha: T,
    },
    SoftmaxMasked {
        axis: usize,
    },
    // keep is sampled once at record time and reused on replay so the tape
    // stays a deterministic program
    Dropout {
        keep: Option<Vec<bool>>,
        scale: T,
    },
    Transpose,
    Broadcast {
        to: Vec<usize>,
    },
    ScalarMul {
        factor: T,
    },
    MaskedMax {
        argmax: Vec<usize>,
    },
    GatherRows {
        ids: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: OpRecord<T>,
    inputs: Vec<TensorRef>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], keyed by node id.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, r: TensorRef) -> Option<&Tensor<T>> {
        self.grads.get(r.0).and_then(|g| g.as_ref())
    }
}

/// Linear record of primitive applications with reverse-mode gradients.
#[derive(Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

// (outer, dim, inner) block geometry for iterating slices along `axis`.
fn axis_geom(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

fn check_axis(primitive: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::ShapeMismatch {
            primitive,
            detail: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

fn check_mask<T: Real>(primitive: &'static str, mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::ShapeMismatch {
            primitive,
            detail: "mask entries must be exactly 0 or 1".to_string(),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorRef {
        self.push_leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> TensorRef {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf that participates in gradient computation.
    pub fn parameter(&mut self, value: Tensor<T>) -> TensorRef {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            op: OpRecord::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    pub fn value(&self, r: TensorRef) -> &Tensor<T> {
        &self.nodes[r.0].value
    }

    pub fn requires_grad(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    /// Overwrite a leaf's data in place (finite-difference perturbations).
    pub fn set_leaf(&mut self, r: TensorRef, data: &[T]) -> Result<()> {
        let node = &mut self.nodes[r.0];
        if !matches!(node.op, OpRecord::Leaf) {
            return Err(Error::Mismatch("set_leaf: node is not a leaf".to_string()));
        }
        if data.len() != node.value.numel() {
            return Err(Error::BadTensor {
                shape: node.value.shape().to_vec(),
                len: data.len(),
            });
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Recompute every non-leaf value in tape order. Dropout masks recorded
    /// at apply time are reused, so a replayed program is the same program.
    pub fn replay_forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, OpRecord::Leaf) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|r| &before[r.0].value).collect();
            node.value = eval(&mut node.op, &inputs)?;
        }
        Ok(())
    }

    /// Apply a primitive, recording a node. This is the single entry point
    /// behind the convenience wrappers below.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[TensorRef]) -> Result<TensorRef> {
        if let Some(arity) = primitive.arity() {
            if inputs.len() != arity {
                return Err(Error::ShapeMismatch {
                    primitive: primitive.name(),
                    detail: format!("expected {arity} inputs, got {}", inputs.len()),
                });
            }
        } else if inputs.is_empty() {
            return Err(Error::ShapeMismatch {
                primitive: primitive.name(),
                detail: "expected at least one input".to_string(),
            });
        }
        for r in inputs {
            if r.0 >= self.nodes.len() {
                return Err(Error::IndexOutOfRange {
                    what: "tape node",
                    index: r.0,
                    limit: self.nodes.len(),
                });
            }
        }

        let mut op = self.record_for(&primitive, inputs)?;
        let input_tensors: Vec<&Tensor<T>> =
            inputs.iter().map(|r| &self.nodes[r.0].value).collect();
        let value = eval(&mut op, &input_tensors)?;
        // the mask input of masked primitives is structural, it never carries
        // gradient even if built from a grad-tracked tensor
        let grad_inputs: &[TensorRef] = match primitive {
            Primitive::SoftmaxMasked { .. } | Primitive::MaskedMax => &inputs[..1],
            _ => inputs,
        };
        let requires_grad = grad_inputs.iter().any(|r| self.nodes[r.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(TensorRef(self.nodes.len() - 1))
    }

    fn record_for(&self, primitive: &Primitive, inputs: &[TensorRef]) -> Result<OpRecord<T>> {
        Ok(match primitive {
            Primitive::MatMul => OpRecord::MatMul,
            Primitive::Add => OpRecord::Add,
            Primitive::Sub => OpRecord::Sub,
            Primitive::Mul => OpRecord::Mul,
            Primitive::Concat { axis } => OpRecord::Concat { axis: *axis },
            Primitive::Slice { axis, start, end } => OpRecord::Slice {
                axis: *axis,
                start: *start,
                end: *end,
            },
            Primitive::Sum { axis } => OpRecord::Sum { axis: *axis },
            Primitive::Mean { axis } => OpRecord::Mean { axis: *axis },
            Primitive::SumAll => OpRecord::SumAll,
            Primitive::Exp => OpRecord::Exp,
            Primitive::Log => OpRecord::Log,
            Primitive::Tanh => OpRecord::Tanh,
            Primitive::Sigmoid => OpRecord::Sigmoid,
            Primitive::Relu => OpRecord::Relu,
            Primitive::Elu { alpha } => OpRecord::Elu {
                alpha: T::from_f64(*alpha),
            },
            Primitive::SoftmaxMasked { axis } => OpRecord::SoftmaxMasked { axis: *axis },
            Primitive::Dropout {
                rate,
                enabled,
                seed,
            } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::ShapeMismatch {
                        primitive: "dropout",
                        detail: format!("rate {rate} outside [0, 1)"),
                    });
                }
                if *enabled && *rate > 0.0 {
                    let numel = self.nodes[inputs[0].0].value.numel();
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    let keep: Vec<bool> = (0..numel).map(|_| rng.gen::<f64>() >= *rate).collect();
                    OpRecord::Dropout {
                        keep: Some(keep),
                        scale: T::from_f64(1.0 / (1.0 - rate)),
                    }
                } else {
                    OpRecord::Dropout {
                        keep: None,
                        scale: T::one(),
                    }
                }
            }
            Primitive::Transpose => OpRecord::Transpose,
            Primitive::Broadcast { shape } => OpRecord::Broadcast { to: shape.clone() },
            Primitive::ScalarMul { factor } => OpRecord::ScalarMul {
                factor: T::from_f64(*factor),
            },
            Primitive::MaskedMax => OpRecord::MaskedMax { argmax: Vec::new() },
            Primitive::GatherRows { ids } => OpRecord::GatherRows { ids: ids.clone() },
        })
    }

    // ---- convenience wrappers ----

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(
        &mut self,
        x: TensorRef,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<TensorRef> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }

    /// Single row of a rank-2 tensor as a 1xN tensor.
    pub fn row(&mut self, x: TensorRef, index: usize) -> Result<TensorRef> {
        self.slice(x, 0, index, index + 1)
    }

    pub fn sum_axis(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        self.apply(Primitive::Sum { axis }, &[x])
    }

    pub fn mean_axis(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        self.apply(Primitive::Mean { axis }, &[x])
    }

    pub fn sum_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::SumAll, &[x])
    }

    pub fn exp(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn tanh(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn relu(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn elu(&mut self, x: TensorRef, alpha: f64) -> Result<TensorRef> {
        self.apply(Primitive::Elu { alpha }, &[x])
    }

    pub fn softmax_masked(
        &mut self,
        logits: TensorRef,
        mask: TensorRef,
        axis: usize,
    ) -> Result<TensorRef> {
        self.apply(Primitive::SoftmaxMasked { axis }, &[logits, mask])
    }

    pub fn dropout(
        &mut self,
        x: TensorRef,
        rate: f64,
        enabled: bool,
        seed: u64,
    ) -> Result<TensorRef> {
        self.apply(
            Primitive::Dropout {
                rate,
                enabled,
                seed,
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn broadcast(&mut self, x: TensorRef, shape: Vec<usize>) -> Result<TensorRef> {
        self.apply(Primitive::Broadcast { shape }, &[x])
    }

    pub fn scalar_mul(&mut self, x: TensorRef, factor: f64) -> Result<TensorRef> {
        self.apply(Primitive::ScalarMul { factor }, &[x])
    }

    pub fn masked_max(&mut self, x: TensorRef, mask: TensorRef) -> Result<TensorRef> {
        self.apply(Primitive::MaskedMax, &[x, mask])
    }

    pub fn gather_rows(&mut self, table: TensorRef, ids: &[usize]) -> Result<TensorRef> {
        self.apply(Primitive::GatherRows { ids: ids.to_vec() }, &[table])
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradient buffers for every
    /// grad-requiring node reachable from the loss.
    pub fn backward(&self, loss: TensorRef) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Mismatch("backward on an empty tape".to_string()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, OpRecord::Leaf) {
                continue;
            }
            let Some(out_grad) = grads[idx].clone() else {
                continue;
            };
            let input_values: Vec<&Tensor<T>> =
                node.inputs.iter().map(|r| &self.nodes[r.0].value).collect();
            let input_grads = backprop(&node.op, &input_values, &node.value, &out_grad)?;
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                match &mut grads[slot.0] {
                    Some(acc) => accumulate(acc, &grad),
                    empty => *empty = Some(grad),
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(acc: &mut Tensor<T>, add: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), add.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a = *a + *b;
    }
}

fn validate_broadcast(from: &[usize], to: &[usize]) -> Result<()> {
    let ok = from.len() == to.len() && from.iter().zip(to).all(|(&f, &t)| f == t || f == 1);
    if !ok {
        return Err(Error::ShapeMismatch {
            primitive: "broadcast",
            detail: shapes(from, to),
        });
    }
    Ok(())
}

fn finite_check<T: Real>(primitive: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if !t.is_finite() {
        return Err(Error::NonFinite { primitive });
    }
    Ok(t)
}

// ---- forward kernels ----

fn eval<T: Real>(op: &mut OpRecord<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        OpRecord::Leaf => unreachable!("leaves are never evaluated"),
        OpRecord::MatMul => matmul_fwd(inputs[0], inputs[1]),
        OpRecord::Add => elementwise_fwd("add", inputs[0], inputs[1], |a, b| a + b),
        OpRecord::Sub => elementwise_fwd("sub", inputs[0], inputs[1], |a, b| a - b),
        OpRecord::Mul => elementwise_fwd("mul", inputs[0], inputs[1], |a, b| a * b),
        OpRecord::Concat { axis } => concat_fwd(inputs, *axis),
        OpRecord::Slice { axis, start, end } => slice_fwd(inputs[0], *axis, *start, *end),
        OpRecord::Sum { axis } => reduce_axis_fwd("sum", inputs[0], *axis, false),
        OpRecord::Mean { axis } => reduce_axis_fwd("mean", inputs[0], *axis, true),
        OpRecord::SumAll => {
            let total = inputs[0].data().iter().fold(T::zero(), |acc, &v| acc + v);
            finite_check("sum_all", Tensor::scalar(total))
        }
        OpRecord::Exp => unary_fwd("exp", inputs[0], |v| v.exp()),
        OpRecord::Log => unary_fwd("log", inputs[0], |v| v.ln()),
        OpRecord::Tanh => unary_fwd("tanh", inputs[0], |v| v.tanh()),
        OpRecord::Sigmoid => {
            unary_fwd("sigmoid", inputs[0], |v| T::one() / (T::one() + (-v).exp()))
        }
        OpRecord::Relu => unary_fwd(
            "relu",
            inputs[0],
            |v| {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            },
        ),
        OpRecord::Elu { alpha } => {
            let a = *alpha;
            unary_fwd("elu", inputs[0], |v| {
                if v > T::zero() {
                    v
                } else {
                    a * (v.exp() - T::one())
                }
            })
        }
        OpRecord::SoftmaxMasked { axis } => softmax_masked_fwd(inputs[0], inputs[1], *axis),
        OpRecord::Dropout { keep, scale } => {
            let x = inputs[0];
            match keep {
                None => Ok(x.clone()),
                Some(keep) => {
                    let data = x
                        .data()
                        .iter()
                        .zip(keep.iter())
                        .map(|(&v, &k)| if k { v * *scale } else { T::zero() })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)
                }
            }
        }
        OpRecord::Transpose => transpose_fwd(inputs[0]),
        OpRecord::Broadcast { to } => broadcast_fwd(inputs[0], to),
        OpRecord::ScalarMul { factor } => {
            let f = *factor;
            unary_fwd("scalar_mul", inputs[0], |v| v * f)
        }
        OpRecord::MaskedMax { argmax } => masked_max_fwd(inputs[0], inputs[1], argmax),
        OpRecord::GatherRows { ids } => gather_rows_fwd(inputs[0], ids),
    }
}

fn matmul_fwd<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            primitive: "matmul",
            detail: shapes(a.shape(), b.shape()),
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    finite_check("matmul", Tensor::new(vec![m, n], out)?)
}

fn elementwise_fwd<T: Real>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            primitive: name,
            detail: shapes(a.shape(), b.shape()),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    finite_check(name, Tensor::new(a.shape().to_vec(), data)?)
}

fn unary_fwd<T: Real>(name: &'static str, x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let data = x.data().iter().map(|&v| f(v)).collect();
    finite_check(name, Tensor::new(x.shape().to_vec(), data)?)
}

fn concat_fwd<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts[0];
    check_axis("concat", first.shape(), axis)?;
    let rank = first.rank();
    let mut out_shape = first.shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch {
                primitive: "concat",
                detail: shapes(first.shape(), p.shape()),
            });
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(Error::ShapeMismatch {
                    primitive: "concat",
                    detail: shapes(first.shape(), p.shape()),
                });
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let (outer, _, inner) = axis_geom(&out_shape, axis);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let out_block = axis_total * inner;
    let mut offset = 0;
    for p in parts {
        let dim = p.shape()[axis];
        let in_block = dim * inner;
        for o in 0..outer {
            let src = &p.data()[o * in_block..(o + 1) * in_block];
            let dst = &mut out[o * out_block + offset..o * out_block + offset + in_block];
            dst.copy_from_slice(src);
        }
        offset += in_block;
    }
    Tensor::new(out_shape, out)
}

fn slice_fwd<T: Real>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    check_axis("slice", x.shape(), axis)?;
    let dim = x.shape()[axis];
    if start >= end || end > dim {
        return Err(Error::ShapeMismatch {
            primitive: "slice",
            detail: format!("range {start}..{end} invalid for axis of extent {dim}"),
        });
    }
    let (outer, _, inner) = axis_geom(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = end - start;
    let in_block = dim * inner;
    let out_block = (end - start) * inner;
    let mut out = vec![T::zero(); outer * out_block];
    for o in 0..outer {
        let src = &x.data()[o * in_block + start * inner..o * in_block + end * inner];
        out[o * out_block..(o + 1) * out_block].copy_from_slice(src);
    }
    Tensor::new(out_shape, out)
}

fn reduce_axis_fwd<T: Real>(
    name: &'static str,
    x: &Tensor<T>,
    axis: usize,
    mean: bool,
) -> Result<Tensor<T>> {
    check_axis(name, x.shape(), axis)?;
    let (outer, dim, inner) = axis_geom(x.shape(), axis);
    if dim == 0 {
        return Err(Error::ShapeMismatch {
            primitive: name,
            detail: format!("cannot reduce empty axis of shape {:?}", x.shape()),
        });
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = 1;
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for d in 0..dim {
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + x.data()[(o * dim + d) * inner + i];
            }
        }
    }
    if mean {
        let inv = T::one() / T::from_usize(dim);
        for v in &mut out {
            *v = *v * inv;
        }
    }
    finite_check(name, Tensor::new(out_shape, out)?)
}

// Large negative offset added to masked logits; exp underflows to exactly 0
// before masked outputs are force-zeroed.
fn mask_offset<T: Real>() -> T {
    T::from_f64(-1e9)
}

fn softmax_masked_fwd<T: Real>(
    logits: &Tensor<T>,
    mask: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    if logits.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            primitive: "softmax_masked",
            detail: shapes(logits.shape(), mask.shape()),
        });
    }
    check_axis("softmax_masked", logits.shape(), axis)?;
    check_mask("softmax_masked", mask)?;

    let (outer, dim, inner) = axis_geom(logits.shape(), axis);
    let mut out = vec![T::zero(); logits.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let index = |d: usize| (o * dim + d) * inner + i;
            let valid = (0..dim).any(|d| mask.data()[index(d)] == T::one());
            if !valid {
                return Err(Error::FullyMaskedSlice {
                    primitive: "softmax_masked",
                });
            }
            let mut hi = T::neg_infinity();
            for d in 0..dim {
                let z = if mask.data()[index(d)] == T::one() {
                    logits.data()[index(d)]
                } else {
                    logits.data()[index(d)] + mask_offset()
                };
                if z > hi {
                    hi = z;
                }
            }
            let mut denom = T::zero();
            for d in 0..dim {
                let z = if mask.data()[index(d)] == T::one() {
                    logits.data()[index(d)]
                } else {
                    logits.data()[index(d)] + mask_offset()
                };
                let e = (z - hi).exp();
                out[index(d)] = e;
                denom = denom + e;
            }
            for d in 0..dim {
                out[index(d)] = if mask.data()[index(d)] == T::one() {
                    out[index(d)] / denom
                } else {
                    T::zero()
                };
            }
        }
    }
    finite_check("softmax_masked", Tensor::new(logits.shape().to_vec(), out)?)
}

fn transpose_fwd<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            primitive: "transpose",
            detail: format!("expected rank 2, got shape {:?}", x.shape()),
        });
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn broadcast_fwd<T: Real>(x: &Tensor<T>, to: &[usize]) -> Result<Tensor<T>> {
    validate_broadcast(x.shape(), to)?;
    let numel: usize = to.iter().product();
    let rank = to.len();
    let mut out = vec![T::zero(); numel];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % to[d];
            rem /= to[d];
        }
        let mut src = 0;
        for (d, &coord) in coords.iter().enumerate() {
            let c = if x.shape()[d] == 1 { 0 } else { coord };
            src = src * x.shape()[d] + c;
        }
        *slot = x.data()[src];
    }
    Tensor::new(to.to_vec(), out)
}

fn masked_max_fwd<T: Real>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    argmax: &mut Vec<usize>,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            primitive: "masked_max",
            detail: shapes(x.shape(), mask.shape()),
        });
    }
    check_mask("masked_max", mask)?;
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    argmax.clear();
    argmax.resize(cols, 0);
    let mut out = vec![T::zero(); cols];
    for j in 0..cols {
        let mut best: Option<(usize, T)> = None;
        for i in 0..rows {
            if mask.at2(i, j) == T::one() {
                let v = x.at2(i, j);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        let Some((i, v)) = best else {
            return Err(Error::FullyMaskedSlice {
                primitive: "masked_max",
            });
        };
        argmax[j] = i;
        out[j] = v;
    }
    Tensor::new(vec![1, cols], out)
}

fn gather_rows_fwd<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::ShapeMismatch {
            primitive: "gather_rows",
            detail: format!("expected rank-2 table, got shape {:?}", table.shape()),
        });
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= rows {
            return Err(Error::IndexOutOfRange {
                what: "row id",
                index: id,
                limit: rows,
            });
        }
        out.extend_from_slice(&table.data()[id * cols..(id + 1) * cols]);
    }
    Tensor::new(vec![ids.len(), cols], out)
}

// ---- backward kernels ----

// Per-input gradient contributions; None for inputs that take no gradient
// (masks).
fn backprop<T: Real>(
    op: &OpRecord<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    out_grad: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    Ok(match op {
        OpRecord::Leaf => vec![],
        OpRecord::MatMul => {
            let a = inputs[0];
            let b = inputs[1];
            let da = matmul_fwd(out_grad, &transpose_fwd(b)?)?;
            let db = matmul_fwd(&transpose_fwd(a)?, out_grad)?;
            vec![Some(da), Some(db)]
        }
        OpRecord::Add => vec![Some(out_grad.clone()), Some(out_grad.clone())],
        OpRecord::Sub => {
            let neg = scale(out_grad, -T::one());
            vec![Some(out_grad.clone()), Some(neg)]
        }
        OpRecord::Mul => {
            let da = hadamard(out_grad, inputs[1]);
            let db = hadamard(out_grad, inputs[0]);
            vec![Some(da), Some(db)]
        }
        OpRecord::Concat { axis } => {
            let mut grads = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for p in inputs {
                let dim = p.shape()[*axis];
                grads.push(Some(slice_fwd(out_grad, *axis, offset, offset + dim)?));
                offset += dim;
            }
            grads
        }
        OpRecord::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, dim, inner) = axis_geom(x.shape(), *axis);
            let mut dx = vec![T::zero(); x.numel()];
            let out_block = (end - start) * inner;
            let in_block = dim * inner;
            for o in 0..outer {
                let dst = &mut dx[o * in_block + start * inner..o * in_block + end * inner];
                let src = &out_grad.data()[o * out_block..(o + 1) * out_block];
                dst.copy_from_slice(src);
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        OpRecord::Sum { axis } | OpRecord::Mean { axis } => {
            let x = inputs[0];
            let (outer, dim, inner) = axis_geom(x.shape(), *axis);
            let factor = match op {
                OpRecord::Mean { .. } => T::one() / T::from_usize(dim),
                _ => T::one(),
            };
            let mut dx = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for d in 0..dim {
                    for i in 0..inner {
                        dx[(o * dim + d) * inner + i] = out_grad.data()[o * inner + i] * factor;
                    }
                }
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
        }
        OpRecord::SumAll => {
            let g = out_grad.data()[0];
            vec![Some(Tensor::full(inputs[0].shape().to_vec(), g))]
        }
        OpRecord::Exp => vec![Some(hadamard(out_grad, output))],
        OpRecord::Log => {
            let dx = zip_map(out_grad, inputs[0], |g, x| g / x);
            vec![Some(dx)]
        }
        OpRecord::Tanh => {
            let dx = zip_map(out_grad, output, |g, y| g * (T::one() - y * y));
            vec![Some(dx)]
        }
        OpRecord::Sigmoid => {
            let dx = zip_map(out_grad, output, |g, y| g * y * (T::one() - y));
            vec![Some(dx)]
        }
        OpRecord::Relu => {
            let dx = zip_map(out_grad, inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            });
            vec![Some(dx)]
        }
        OpRecord::Elu { alpha } => {
            let a = *alpha;
            let dx = zip3_map(out_grad, inputs[0], output, |g, x, y| {
                if x > T::zero() {
                    g
                } else {
                    g * (y + a)
                }
            });
            vec![Some(dx)]
        }
        OpRecord::SoftmaxMasked { axis } => {
            let y = output;
            let (outer, dim, inner) = axis_geom(y.shape(), *axis);
            let mut dx = vec![T::zero(); y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let index = |d: usize| (o * dim + d) * inner + i;
                    let mut dot = T::zero();
                    for d in 0..dim {
                        dot = dot + y.data()[index(d)] * out_grad.data()[index(d)];
                    }
                    for d in 0..dim {
                        let yd = y.data()[index(d)];
                        dx[index(d)] = yd * (out_grad.data()[index(d)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), dx)?), None]
        }
        OpRecord::Dropout { keep, scale: s } => match keep {
            None => vec![Some(out_grad.clone())],
            Some(keep) => {
                let data = out_grad
                    .data()
                    .iter()
                    .zip(keep.iter())
                    .map(|(&g, &k)| if k { g * *s } else { T::zero() })
                    .collect();
                vec![Some(Tensor::new(out_grad.shape().to_vec(), data)?)]
            }
        },
        OpRecord::Transpose => vec![Some(transpose_fwd(out_grad)?)],
        OpRecord::Broadcast { .. } => {
            let from = inputs[0].shape();
            let to = out_grad.shape();
            let rank = to.len();
            let mut dx = vec![T::zero(); inputs[0].numel()];
            let mut coords = vec![0usize; rank];
            for (flat, &g) in out_grad.data().iter().enumerate() {
                let mut rem = flat;
                for d in (0..rank).rev() {
                    coords[d] = rem % to[d];
                    rem /= to[d];
                }
                let mut src = 0;
                for d in 0..rank {
                    let c = if from[d] == 1 { 0 } else { coords[d] };
                    src = src * from[d] + c;
                }
                dx[src] = dx[src] + g;
            }
            vec![Some(Tensor::new(from.to_vec(), dx)?)]
        }
        OpRecord::ScalarMul { factor } => vec![Some(scale(out_grad, *factor))],
        OpRecord::MaskedMax { argmax } => {
            let x = inputs[0];
            let cols = x.shape()[1];
            let mut dx = vec![T::zero(); x.numel()];
            for (j, &i) in argmax.iter().enumerate() {
                dx[i * cols + j] = dx[i * cols + j] + out_grad.data()[j];
            }
            vec![Some(Tensor::new(x.shape().to_vec(), dx)?), None]
        }
        OpRecord::GatherRows { ids } => {
            let table = inputs[0];
            let cols = table.shape()[1];
            let mut dt = vec![T::zero(); table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for c in 0..cols {
                    dt[id * cols + c] = dt[id * cols + c] + out_grad.data()[row * cols + c];
                }
            }
            vec![Some(Tensor::new(table.shape().to_vec(), dt)?)]
        }
    })
}

fn scale<T: Real>(t: &Tensor<T>, f: T) -> Tensor<T> {
    Tensor::new(
        t.shape().to_vec(),
        t.data().iter().map(|&v| v * f).collect(),
    )
    .expect("shape preserved")
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("shape preserved")
}

fn zip3_map<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect(),
    )
    .expect("shape preserved")
}
