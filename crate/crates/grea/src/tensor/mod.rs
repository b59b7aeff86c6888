//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on tensors created from it;
//! [`Tensor::backward`] replays the record in exact reverse execution order
//! and accumulates adjoints into every grad-enabled node. One tape serves
//! one forward/backward pass; parameters live outside the tape as plain
//! [`Param`] arrays and are re-bound as leaves each step.
//!
//! Broadcasting is deliberately restricted to one pattern: a column vector
//! (shape `[n]` or `[n,1]`) combined elementwise with an `[n,d]` matrix.
//! That is the only form the model needs and it keeps every adjoint simple.

pub mod kernels;

mod grad_check;

pub use grad_check::{grad_check, GradCheckReport};
pub use kernels::SparseSym;

use serde::{Deserialize, Serialize};
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("segment id {id} out of range for {num_segments} segments")]
    SegmentRange { id: usize, num_segments: usize },
    #[error("gather index {index} out of range for {rows} rows")]
    GatherRange { index: usize, rows: usize },
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("backward already ran on this tape; call zero_grads first")]
    BackwardTwice,
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value encountered in {ctx}")]
    NonFinite { ctx: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Named parameter array living outside any tape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param {name}: shape/values mismatch"
        );
        Param { name, shape, values }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// lhs is the column vector, rhs the matrix.
    LhsCol,
    /// rhs is the column vector, lhs the matrix.
    RhsCol,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, bcast: Broadcast },
    Sub { a: usize, b: usize, bcast: Broadcast },
    Mul { a: usize, b: usize, bcast: Broadcast },
    Scale { a: usize, c: f64 },
    Sigmoid { a: usize },
    Relu { a: usize },
    EMax { a: usize, b: usize },
    SegmentSum { a: usize, segments: Rc<Vec<usize>>, width: usize },
    SegmentMax { a: usize, argmax: Vec<usize>, width: usize },
    ConcatRows { a: usize, b: usize, d1: usize, d2: usize },
    GatherRows { a: usize, indices: Rc<Vec<usize>>, width: usize },
    AddBias { a: usize, bias: usize },
    SumAll { a: usize },
    SpmmSym { adj: Rc<SparseSym>, x: usize, width: usize },
    Reshape { a: usize },
    BceWithLogits { logits: usize, targets: usize },
    Mse { pred: usize, target: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Operation recorder. Cheap to clone (shared handle); single-threaded.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to one tape node. Values are immutable after creation; only the
/// grad field is written later, by `backward`.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<TapeInner>,
    id: usize,
    shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-count and width interpretation: first dim is rows, remaining dims
/// collapse into the row width (empty shape: one row of width one).
fn rows_width(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn is_column(shape: &[usize]) -> bool {
    shape.len() == 1 || (shape.len() == 2 && shape[1] == 1)
}

fn broadcast_kind(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<(Broadcast, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Broadcast::None, lhs.to_vec()));
    }
    let mismatch = || TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() };
    if is_column(lhs) && rhs.len() == 2 && rhs[0] == lhs[0] {
        return Ok((Broadcast::LhsCol, rhs.to_vec()));
    }
    if is_column(rhs) && lhs.len() == 2 && lhs[0] == rhs[0] {
        return Ok((Broadcast::RhsCol, lhs.to_vec()));
    }
    Err(mismatch())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, shape: shape.clone(), values, grad: None, requires_grad });
        Tensor { tape: Rc::clone(&self.inner), id, shape }
    }

    /// Constant leaf (no gradient).
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf_inner(shape, values, false)
    }

    /// Gradient-enabled leaf.
    pub fn var(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf_inner(shape, values, true)
    }

    fn leaf_inner(&self, shape: &[usize], values: Vec<f64>, grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(TensorError::Contract {
                op: "leaf",
                msg: format!("shape {:?} expects {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { ctx: "leaf values" });
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, grad))
    }

    /// Bind a parameter as a leaf; `trainable` controls gradient tracking.
    pub fn bind(&self, param: &Param, trainable: bool) -> Result<Tensor> {
        self.leaf_inner(&param.shape, param.values.clone(), trainable)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        self.push(Op::Leaf, shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn ones(&self, shape: &[usize]) -> Tensor {
        self.push(Op::Leaf, shape.to_vec(), vec![1.0; numel(shape)], false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clear all gradients and re-arm backward.
    pub fn zero_grads(&self) {
        for node in self.inner.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.inner.backward_done.set(false);
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn values(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    /// Sole entry of a one-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].values.len(), 1);
        nodes[self.id].values[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn tape_handle(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn node_values<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[id].values)
    }

    fn requires(&self, other: Option<&Tensor>) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].requires_grad || other.map_or(false, |o| nodes[o.id].requires_grad)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (ls, rs) = (&self.shape, &other.shape);
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::Shape { op: "matmul", lhs: ls.clone(), rhs: rs.clone() });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let values = self.node_values(self.id, |a| {
            self.node_values(other.id, |b| kernels::matmul(a, b, m, k, n))
        });
        let grad = self.requires(Some(other));
        Ok(self.tape_handle().push(
            Op::Matmul { a: self.id, b: other.id, m, k, n },
            vec![m, n],
            values,
            grad,
        ))
    }

    /// Symmetric sparse matrix times self (message-passing aggregation).
    pub fn spmm_sym(&self, adj: &Rc<SparseSym>) -> Result<Tensor> {
        let (rows, width) = rows_width(&self.shape);
        if rows != adj.n {
            return Err(TensorError::Shape {
                op: "spmm_sym",
                lhs: vec![adj.n, adj.n],
                rhs: self.shape.clone(),
            });
        }
        let values = self.node_values(self.id, |x| kernels::spmm(adj, x, width));
        let grad = self.requires(None);
        Ok(self.tape_handle().push(
            Op::SpmmSym { adj: Rc::clone(adj), x: self.id, width },
            self.shape.clone(),
            values,
            grad,
        ))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op_name: &'static str,
        make_op: impl FnOnce(usize, usize, Broadcast) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_tape(other)?;
        let (bcast, out_shape) = broadcast_kind(op_name, &self.shape, &other.shape)?;
        let values = self.node_values(self.id, |a| {
            self.node_values(other.id, |b| match bcast {
                Broadcast::None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>(),
                Broadcast::LhsCol => {
                    let (rows, d) = rows_width(&out_shape);
                    let mut out = Vec::with_capacity(rows * d);
                    for i in 0..rows {
                        for j in 0..d {
                            out.push(f(a[i], b[i * d + j]));
                        }
                    }
                    out
                }
                Broadcast::RhsCol => {
                    let (rows, d) = rows_width(&out_shape);
                    let mut out = Vec::with_capacity(rows * d);
                    for i in 0..rows {
                        for j in 0..d {
                            out.push(f(a[i * d + j], b[i]));
                        }
                    }
                    out
                }
            })
        });
        let grad = self.requires(Some(other));
        Ok(self
            .tape_handle()
            .push(make_op(self.id, other.id, bcast), out_shape, values, grad))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b, bcast| Op::Add { a, b, bcast }, |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "sub", |a, b, bcast| Op::Sub { a, b, bcast }, |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul", |a, b, bcast| Op::Mul { a, b, bcast }, |x, y| x * y)
    }

    /// Elementwise maximum; gradient routes to the left operand on ties.
    pub fn emax(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "emax",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let values = self.node_values(self.id, |a| {
            self.node_values(other.id, |b| {
                a.iter().zip(b).map(|(&x, &y)| x.max(y)).collect::<Vec<f64>>()
            })
        });
        let grad = self.requires(Some(other));
        Ok(self.tape_handle().push(
            Op::EMax { a: self.id, b: other.id },
            self.shape.clone(),
            values,
            grad,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.node_values(self.id, |a| a.iter().map(|&x| c * x).collect());
        let grad = self.requires(None);
        self.tape_handle()
            .push(Op::Scale { a: self.id, c }, self.shape.clone(), values, grad)
    }

    pub fn sigmoid(&self) -> Tensor {
        let values =
            self.node_values(self.id, |a| a.iter().map(|&x| kernels::sigmoid_scalar(x)).collect());
        let grad = self.requires(None);
        self.tape_handle()
            .push(Op::Sigmoid { a: self.id }, self.shape.clone(), values, grad)
    }

    pub fn relu(&self) -> Tensor {
        let values = self.node_values(self.id, |a| a.iter().map(|&x| x.max(0.0)).collect());
        let grad = self.requires(None);
        self.tape_handle()
            .push(Op::Relu { a: self.id }, self.shape.clone(), values, grad)
    }

    // ── Structure ops ────────────────────────────────────────────────

    /// Per-segment row sums into `num_segments` output rows. Segment ids
    /// need not be sorted; empty segments produce zero rows.
    pub fn segment_sum(&self, segments: &Rc<Vec<usize>>, num_segments: usize) -> Result<Tensor> {
        let (rows, width) = rows_width(&self.shape);
        if segments.len() != rows {
            return Err(TensorError::Contract {
                op: "segment_sum",
                msg: format!("{} segment ids for {} rows", segments.len(), rows),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::SegmentRange { id: bad, num_segments });
        }
        let values = self
            .node_values(self.id, |x| kernels::segment_sum(x, width, segments, num_segments));
        let out_shape = match self.shape.len() {
            0 | 1 => vec![num_segments],
            _ => {
                let mut s = self.shape.clone();
                s[0] = num_segments;
                s
            }
        };
        let grad = self.requires(None);
        Ok(self.tape_handle().push(
            Op::SegmentSum { a: self.id, segments: Rc::clone(segments), width },
            out_shape,
            values,
            grad,
        ))
    }

    /// Per-segment, per-column max. Every segment must be nonempty.
    pub fn segment_max(&self, segments: &Rc<Vec<usize>>, num_segments: usize) -> Result<Tensor> {
        let (rows, width) = rows_width(&self.shape);
        if segments.len() != rows {
            return Err(TensorError::Contract {
                op: "segment_max",
                msg: format!("{} segment ids for {} rows", segments.len(), rows),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::SegmentRange { id: bad, num_segments });
        }
        let (values, argmax) = self
            .node_values(self.id, |x| kernels::segment_max(x, width, segments, num_segments))
            .map_err(|s| TensorError::Contract {
                op: "segment_max",
                msg: format!("segment {s} is empty"),
            })?;
        let out_shape = match self.shape.len() {
            0 | 1 => vec![num_segments],
            _ => {
                let mut s = self.shape.clone();
                s[0] = num_segments;
                s
            }
        };
        let grad = self.requires(None);
        Ok(self.tape_handle().push(
            Op::SegmentMax { a: self.id, argmax, width },
            out_shape,
            values,
            grad,
        ))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (ls, rs) = (&self.shape, &other.shape);
        if ls.len() != 2 || rs.len() != 2 || ls[0] != rs[0] {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let (m, d1, d2) = (ls[0], ls[1], rs[1]);
        let values = self.node_values(self.id, |a| {
            self.node_values(other.id, |b| {
                let mut out = Vec::with_capacity(m * (d1 + d2));
                for i in 0..m {
                    out.extend_from_slice(&a[i * d1..(i + 1) * d1]);
                    out.extend_from_slice(&b[i * d2..(i + 1) * d2]);
                }
                out
            })
        });
        let grad = self.requires(Some(other));
        Ok(self.tape_handle().push(
            Op::ConcatRows { a: self.id, b: other.id, d1, d2 },
            vec![m, d1 + d2],
            values,
            grad,
        ))
    }

    /// Select rows by index (repeats allowed); adjoint scatter-adds.
    pub fn gather_rows(&self, indices: &Rc<Vec<usize>>) -> Result<Tensor> {
        let (rows, width) = rows_width(&self.shape);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::GatherRange { index: bad, rows });
        }
        let values = self.node_values(self.id, |x| {
            let mut out = Vec::with_capacity(indices.len() * width);
            for &i in indices.iter() {
                out.extend_from_slice(&x[i * width..(i + 1) * width]);
            }
            out
        });
        let out_shape = match self.shape.len() {
            0 | 1 => vec![indices.len()],
            _ => {
                let mut s = self.shape.clone();
                s[0] = indices.len();
                s
            }
        };
        let grad = self.requires(None);
        Ok(self.tape_handle().push(
            Op::GatherRows { a: self.id, indices: Rc::clone(indices), width },
            out_shape,
            values,
            grad,
        ))
    }

    /// Add a `[d]` bias vector to every row of an `[n,d]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        self.same_tape(bias)?;
        let (ls, bs) = (&self.shape, &bias.shape);
        if ls.len() != 2 || bs.len() != 1 || bs[0] != ls[1] {
            return Err(TensorError::Shape { op: "add_bias", lhs: ls.clone(), rhs: bs.clone() });
        }
        let (n, d) = (ls[0], ls[1]);
        let values = self.node_values(self.id, |x| {
            self.node_values(bias.id, |b| {
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    for j in 0..d {
                        out.push(x[i * d + j] + b[j]);
                    }
                }
                out
            })
        });
        let grad = self.requires(Some(bias));
        Ok(self.tape_handle().push(
            Op::AddBias { a: self.id, bias: bias.id },
            ls.clone(),
            values,
            grad,
        ))
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor {
        let value = self.node_values(self.id, |x| x.iter().sum::<f64>());
        let grad = self.requires(None);
        self.tape_handle().push(Op::SumAll { a: self.id }, vec![], vec![value], grad)
    }

    /// Mean of all entries.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.values();
        let grad = self.requires(None);
        Ok(self.tape_handle().push(Op::Reshape { a: self.id }, shape.to_vec(), values, grad))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean binary cross-entropy from logits, in the stable log-sum-exp
    /// form. Targets must be 0/1 and are never differentiated.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        self.same_tape(targets)?;
        if self.numel() != targets.numel() || self.numel() == 0 {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: self.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let bad = targets.node_values(targets.id, |y| y.iter().any(|&v| v != 0.0 && v != 1.0));
        if bad {
            return Err(TensorError::Contract {
                op: "bce_with_logits",
                msg: "targets must be exactly 0 or 1".into(),
            });
        }
        let value = self.node_values(self.id, |z| {
            self.node_values(targets.id, |y| {
                z.iter().zip(y).map(|(&z, &y)| kernels::bce_logit_scalar(z, y)).sum::<f64>()
                    / z.len() as f64
            })
        });
        let grad = self.requires(None);
        Ok(self.tape_handle().push(
            Op::BceWithLogits { logits: self.id, targets: targets.id },
            vec![],
            vec![value],
            grad,
        ))
    }

    /// Mean squared error against a target tensor of equal size.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        self.same_tape(target)?;
        if self.numel() != target.numel() || self.numel() == 0 {
            return Err(TensorError::Shape {
                op: "mse",
                lhs: self.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        let value = self.node_values(self.id, |p| {
            self.node_values(target.id, |t| {
                p.iter().zip(t).map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>() / p.len() as f64
            })
        });
        let grad = self.requires(Some(target));
        Ok(self.tape_handle().push(
            Op::Mse { pred: self.id, target: target.id },
            vec![],
            vec![value],
            grad,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from this scalar. Populates `grad` on every
    /// grad-enabled node that contributed to it. Running twice without
    /// `Tape::zero_grads` in between is an error.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: self.shape.clone() });
        }
        if self.tape.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.tape.backward_done.set(true);

        let mut nodes = self.tape.nodes.borrow_mut();
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adjoints[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = std::mem::take(&mut adjoints[id]) else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut adjoints);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Accumulate `contrib` into the adjoint slot of `target` if it needs one.
fn accumulate(
    nodes: &[Node],
    adjoints: &mut [Option<Vec<f64>>],
    target: usize,
    contrib: impl FnOnce() -> Vec<f64>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let c = contrib();
    match &mut adjoints[target] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), c.len());
            for (a, v) in acc.iter_mut().zip(&c) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            accumulate(nodes, adjoints, a, || {
                kernels::matmul_a_bt(g, &nodes[b].values, m, n, k)
            });
            accumulate(nodes, adjoints, b, || {
                kernels::matmul_at_b(&nodes[a].values, g, m, k, n)
            });
        }
        Op::Add { a, b, bcast } => {
            let (a, b, bcast) = (*a, *b, *bcast);
            let d = rows_width(&nodes[id].shape).1;
            accumulate(nodes, adjoints, a, || match bcast {
                Broadcast::LhsCol => row_sums(g, d),
                _ => g.to_vec(),
            });
            accumulate(nodes, adjoints, b, || match bcast {
                Broadcast::RhsCol => row_sums(g, d),
                _ => g.to_vec(),
            });
        }
        Op::Sub { a, b, bcast } => {
            let (a, b, bcast) = (*a, *b, *bcast);
            let d = rows_width(&nodes[id].shape).1;
            accumulate(nodes, adjoints, a, || match bcast {
                Broadcast::LhsCol => row_sums(g, d),
                _ => g.to_vec(),
            });
            accumulate(nodes, adjoints, b, || {
                let mut v = match bcast {
                    Broadcast::RhsCol => row_sums(g, d),
                    _ => g.to_vec(),
                };
                v.iter_mut().for_each(|x| *x = -*x);
                v
            });
        }
        Op::Mul { a, b, bcast } => {
            let (a, b, bcast) = (*a, *b, *bcast);
            let d = rows_width(&nodes[id].shape).1;
            let (av, bv) = (&nodes[a].values, &nodes[b].values);
            accumulate(nodes, adjoints, a, || match bcast {
                Broadcast::None => g.iter().zip(bv).map(|(&g, &y)| g * y).collect(),
                Broadcast::LhsCol => {
                    // d/da[i] = Σ_j g[i,j]·b[i,j]
                    let rows = av.len();
                    let mut out = vec![0.0; rows];
                    for (i, o) in out.iter_mut().enumerate() {
                        for j in 0..d {
                            *o += g[i * d + j] * bv[i * d + j];
                        }
                    }
                    out
                }
                Broadcast::RhsCol => g
                    .iter()
                    .enumerate()
                    .map(|(idx, &g)| g * bv[idx / d])
                    .collect(),
            });
            accumulate(nodes, adjoints, b, || match bcast {
                Broadcast::None => g.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                Broadcast::RhsCol => {
                    let rows = bv.len();
                    let mut out = vec![0.0; rows];
                    for (i, o) in out.iter_mut().enumerate() {
                        for j in 0..d {
                            *o += g[i * d + j] * av[i * d + j];
                        }
                    }
                    out
                }
                Broadcast::LhsCol => g
                    .iter()
                    .enumerate()
                    .map(|(idx, &g)| g * av[idx / d])
                    .collect(),
            });
        }
        Op::Scale { a, c } => {
            let (a, c) = (*a, *c);
            accumulate(nodes, adjoints, a, || g.iter().map(|&g| c * g).collect());
        }
        Op::Sigmoid { a } => {
            let a = *a;
            let s = &nodes[id].values;
            accumulate(nodes, adjoints, a, || {
                g.iter().zip(s).map(|(&g, &s)| g * s * (1.0 - s)).collect()
            });
        }
        Op::Relu { a } => {
            let a = *a;
            let x = &nodes[a].values;
            accumulate(nodes, adjoints, a, || {
                g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect()
            });
        }
        Op::EMax { a, b } => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a].values, &nodes[b].values);
            accumulate(nodes, adjoints, a, || {
                g.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&x, &y))| if x >= y { g } else { 0.0 })
                    .collect()
            });
            accumulate(nodes, adjoints, b, || {
                g.iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&x, &y))| if x >= y { 0.0 } else { g })
                    .collect()
            });
        }
        Op::SegmentSum { a, segments, width } => {
            let (a, width) = (*a, *width);
            accumulate(nodes, adjoints, a, || kernels::segment_broadcast(g, width, segments));
        }
        Op::SegmentMax { a, argmax, width } => {
            let (a, width) = (*a, *width);
            let in_len = nodes[a].values.len();
            accumulate(nodes, adjoints, a, || {
                let mut out = vec![0.0; in_len];
                for (flat, &row) in argmax.iter().enumerate() {
                    let col = flat % width;
                    out[row * width + col] += g[flat];
                }
                out
            });
        }
        Op::ConcatRows { a, b, d1, d2 } => {
            let (a, b, d1, d2) = (*a, *b, *d1, *d2);
            let m = nodes[id].shape[0];
            accumulate(nodes, adjoints, a, || {
                let mut out = Vec::with_capacity(m * d1);
                for i in 0..m {
                    out.extend_from_slice(&g[i * (d1 + d2)..i * (d1 + d2) + d1]);
                }
                out
            });
            accumulate(nodes, adjoints, b, || {
                let mut out = Vec::with_capacity(m * d2);
                for i in 0..m {
                    out.extend_from_slice(&g[i * (d1 + d2) + d1..(i + 1) * (d1 + d2)]);
                }
                out
            });
        }
        Op::GatherRows { a, indices, width } => {
            let (a, width) = (*a, *width);
            let in_len = nodes[a].values.len();
            accumulate(nodes, adjoints, a, || {
                let mut out = vec![0.0; in_len];
                for (k, &src) in indices.iter().enumerate() {
                    let dst = &mut out[src * width..(src + 1) * width];
                    let gr = &g[k * width..(k + 1) * width];
                    for (d, &v) in dst.iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                out
            });
        }
        Op::AddBias { a, bias } => {
            let (a, bias) = (*a, *bias);
            let d = nodes[id].shape[1];
            accumulate(nodes, adjoints, a, || g.to_vec());
            accumulate(nodes, adjoints, bias, || {
                let mut out = vec![0.0; d];
                for (flat, &v) in g.iter().enumerate() {
                    out[flat % d] += v;
                }
                out
            });
        }
        Op::SumAll { a } => {
            let a = *a;
            let in_len = nodes[a].values.len();
            accumulate(nodes, adjoints, a, || vec![g[0]; in_len]);
        }
        Op::SpmmSym { adj, x, width } => {
            let (x, width) = (*x, *width);
            accumulate(nodes, adjoints, x, || kernels::spmm(adj, g, width));
        }
        Op::Reshape { a } => {
            let a = *a;
            accumulate(nodes, adjoints, a, || g.to_vec());
        }
        Op::BceWithLogits { logits, targets } => {
            let (logits, targets) = (*logits, *targets);
            let z = &nodes[logits].values;
            let y = &nodes[targets].values;
            let n = z.len() as f64;
            accumulate(nodes, adjoints, logits, || {
                z.iter()
                    .zip(y)
                    .map(|(&z, &y)| g[0] * (kernels::sigmoid_scalar(z) - y) / n)
                    .collect()
            });
        }
        Op::Mse { pred, target } => {
            let (pred, target) = (*pred, *target);
            let p = &nodes[pred].values;
            let t = &nodes[target].values;
            let n = p.len() as f64;
            accumulate(nodes, adjoints, pred, || {
                p.iter().zip(t).map(|(&p, &t)| g[0] * 2.0 * (p - t) / n).collect()
            });
            accumulate(nodes, adjoints, target, || {
                p.iter().zip(t).map(|(&p, &t)| -g[0] * 2.0 * (p - t) / n).collect()
            });
        }
    }
}

fn row_sums(g: &[f64], d: usize) -> Vec<f64> {
    g.chunks(d).map(|row| row.iter().sum()).collect()
}

#[cfg(test)]
mod tests;
