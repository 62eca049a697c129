//! Matrix-valued reverse-mode tape.
//!
//! Every operation appends a node to a [`Tape`]. Backward passes are
//! themselves expressed as tape operations, so a gradient obtained from
//! [`Tape::gradients`] is an ordinary [`Var`] that can be differentiated
//! again. This is what lets a loss on `∂H/∂(q, p)` be differentiated with
//! respect to network weights.
//!
//! Whether a node participates in a backward pass is decided by graph
//! reachability from the requested inputs, so there is no per-node
//! `requires_grad` flag to manage.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Identity(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    /// `alpha * x + beta`
    Affine(usize, T, T),
    ScaleRows(usize, Rc<[T]>),
    AddRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    SumAll(usize),
    BroadcastAll(usize),
    MatMul(usize, usize, bool, bool),
    Softplus(usize),
    Sigmoid(usize),
    Gather(usize, Rc<[usize]>),
    ScatterAdd(usize, Rc<[usize]>),
    Concat(Vec<usize>),
    Slice(usize, usize),
    Pad(usize, usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::MatMul(a, b, _, _) => vec![*a, *b],
            Op::Identity(a)
            | Op::Scale(a, _)
            | Op::Affine(a, _, _)
            | Op::ScaleRows(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::SumAll(a)
            | Op::BroadcastAll(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Gather(a, _)
            | Op::ScatterAdd(a, _)
            | Op::Slice(a, _)
            | Op::Pad(a, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Records a computation for later differentiation. Single-threaded.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(1024)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s become dangling, which
    /// the borrow checker rules out because they borrow the tape.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.push_shared(Rc::new(value), op)
    }

    fn push_shared(&self, value: Rc<Tensor<T>>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A leaf: an input, a constant, or a parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(value))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_, T> {
        self.leaf(Tensor::zeros(rows, cols))
    }

    /// Column-wise concatenation.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Var<'t, T> {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_cols(&refs);
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse-mode gradients of the scalar `output` with respect to each
    /// of `wrt`.
    ///
    /// The returned gradients are recorded on the tape and can themselves
    /// be differentiated. An input that `output` does not depend on gets a
    /// zero gradient with `connected == false`.
    pub fn gradients<'t>(&'t self, output: Var<'t, T>, wrt: &[Var<'t, T>]) -> Result<Vec<Gradient<'t, T>>> {
        let (rows, cols) = output.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalar { rows, cols });
        }
        let out = output.id;
        let Some(start) = wrt.iter().map(|w| w.id).filter(|&w| w <= out).min() else {
            return Ok(wrt.iter().map(|w| Gradient::disconnected(self, *w)).collect());
        };

        // Nodes in [start, out] that depend on any requested input.
        let mut live = vec![false; out + 1 - start];
        for w in wrt {
            if w.id <= out {
                live[w.id - start] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in start..=out {
                if !live[id - start] {
                    live[id - start] = nodes[id].op.inputs().iter().any(|&i| i >= start && live[i - start]);
                }
            }
        }
        let is_live = |id: usize| id >= start && id <= out && live[id - start];

        let mut grads: Vec<Option<usize>> = vec![None; out + 1 - start];
        if is_live(out) {
            grads[out - start] = Some(self.scalar(T::one()).id);
        }
        for id in (start..=out).rev() {
            let Some(g) = grads[id - start] else { continue };
            if !is_live(id) {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let g = Var { tape: self, id: g };
            for (input, contribution) in self.backward_op(id, &op, g, &is_live) {
                if !is_live(input) {
                    continue;
                }
                let slot = &mut grads[input - start];
                *slot = Some(match *slot {
                    Some(prev) => (Var { tape: self, id: prev } + contribution).id,
                    None => contribution.id,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| {
                let g = if is_live(w.id) { grads[w.id - start] } else { None };
                match g {
                    Some(id) => Gradient { value: Var { tape: self, id }, connected: true },
                    None => Gradient::disconnected(self, *w),
                }
            })
            .collect())
    }

    /// Vector-Jacobian products of one node, recorded as new tape nodes.
    fn backward_op<'t>(
        &'t self,
        id: usize,
        op: &Op<T>,
        g: Var<'t, T>,
        live: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Var<'t, T>)> {
        let var = |i: usize| Var { tape: self, id: i };
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Identity(a) => out.push((a, g)),
            Op::Add(a, b) => {
                if live(a) {
                    out.push((a, g));
                }
                if live(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if live(a) {
                    out.push((a, g));
                }
                if live(b) {
                    out.push((b, -g));
                }
            }
            Op::Mul(a, b) => {
                if live(a) {
                    out.push((a, g * var(b)));
                }
                if live(b) {
                    out.push((b, g * var(a)));
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s, _) => out.push((a, g.scale(s))),
            Op::ScaleRows(a, ref f) => {
                let f = Rc::clone(f);
                out.push((a, g.scale_rows_shared(f)));
            }
            Op::AddRow(a, b) => {
                if live(a) {
                    out.push((a, g));
                }
                if live(b) {
                    out.push((b, g.sum_rows()));
                }
            }
            Op::SumRows(a) => out.push((a, g.broadcast_rows(var(a).shape().0))),
            Op::BroadcastRows(a) => out.push((a, g.sum_rows())),
            Op::SumAll(a) => {
                let (r, c) = var(a).shape();
                out.push((a, g.broadcast_all(r, c)));
            }
            Op::BroadcastAll(a) => out.push((a, g.sum())),
            Op::MatMul(a, b, ta, tb) => {
                // C = op(A) op(B)
                if live(a) {
                    let ga = if ta { var(b).matmul_t(g, tb, true) } else { g.matmul_t(var(b), false, !tb) };
                    out.push((a, ga));
                }
                if live(b) {
                    let gb = if tb { g.matmul_t(var(a), true, ta) } else { var(a).matmul_t(g, !ta, false) };
                    out.push((b, gb));
                }
            }
            Op::Softplus(a) => out.push((a, g * var(a).sigmoid())),
            Op::Sigmoid(a) => {
                let s = var(id);
                out.push((a, g * (s * s.affine(-T::one(), T::one()))));
            }
            Op::Gather(a, ref idx) => {
                let rows = var(a).shape().0;
                out.push((a, g.scatter_add_shared(Rc::clone(idx), rows)));
            }
            Op::ScatterAdd(a, ref idx) => out.push((a, g.gather_shared(Rc::clone(idx)))),
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = var(p).shape().1;
                    if live(p) {
                        out.push((p, g.slice_cols(offset, width)));
                    }
                    offset += width;
                }
            }
            Op::Slice(a, start) => {
                let total = var(a).shape().1;
                out.push((a, g.pad_cols(start, total)));
            }
            Op::Pad(a, start) => {
                let width = var(a).shape().1;
                out.push((a, g.slice_cols(start, width)));
            }
        }
        out
    }
}

/// Result of differentiating with respect to one input.
#[derive(Clone, Copy)]
pub struct Gradient<'t, T> {
    pub value: Var<'t, T>,
    /// `false` when the output does not depend on the input; `value` is
    /// then an all-zero constant.
    pub connected: bool,
}

impl<'t, T: Scalar> Gradient<'t, T> {
    fn disconnected(tape: &'t Tape<T>, wrt: Var<'t, T>) -> Self {
        let (r, c) = wrt.shape();
        Gradient { value: tape.zeros(r, c), connected: false }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op)
    }

    /// A new node with the same value. Differentiating with respect to an
    /// alias gives partial derivatives even when the original node depends
    /// on other requested inputs.
    pub fn alias(self) -> Self {
        self.tape.push_shared(self.value(), Op::Identity(self.id))
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn affine(self, alpha: T, beta: T) -> Self {
        let v = self.value().map(|x| alpha * x + beta);
        self.unary(v, Op::Affine(self.id, alpha, beta))
    }

    /// Multiplies row `i` by `factors[i]`; the factors are constants.
    pub fn scale_rows(self, factors: &[T]) -> Self {
        self.scale_rows_shared(factors.into())
    }

    pub fn scale_rows_shared(self, factors: Rc<[T]>) -> Self {
        let v = self.value().scale_rows(&factors);
        self.unary(v, Op::ScaleRows(self.id, factors))
    }

    /// Adds a `1 × c` row to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Self {
        let v = self.value().add_row(&row.value());
        self.unary(v, Op::AddRow(self.id, row.id))
    }

    pub fn sum_rows(self) -> Self {
        let v = self.value().sum_rows();
        self.unary(v, Op::SumRows(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Self {
        let v = self.value().broadcast_rows(rows);
        self.unary(v, Op::BroadcastRows(self.id))
    }

    /// Sum of every entry, as a `1 × 1` node.
    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn broadcast_all(self, rows: usize, cols: usize) -> Self {
        let v = Tensor::filled(rows, cols, self.value().item());
        self.unary(v, Op::BroadcastAll(self.id))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Self {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) · op(rhs)` with optional transposes.
    pub fn matmul_t(self, rhs: Var<'t, T>, ta: bool, tb: bool) -> Self {
        let v = Tensor::matmul(&self.value(), &rhs.value(), ta, tb);
        self.unary(v, Op::MatMul(self.id, rhs.id, ta, tb))
    }

    pub fn softplus(self) -> Self {
        let v = self.value().map(scalar::softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(scalar::sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn gather(self, index: &Rc<[usize]>) -> Self {
        self.gather_shared(Rc::clone(index))
    }

    fn gather_shared(self, index: Rc<[usize]>) -> Self {
        let v = self.value().gather_rows(&index);
        self.unary(v, Op::Gather(self.id, index))
    }

    /// Segment sum: row `i` is added into output row `index[i]`.
    pub fn scatter_add(self, index: &Rc<[usize]>, out_rows: usize) -> Self {
        self.scatter_add_shared(Rc::clone(index), out_rows)
    }

    fn scatter_add_shared(self, index: Rc<[usize]>, out_rows: usize) -> Self {
        let v = self.value().scatter_add_rows(&index, out_rows);
        self.unary(v, Op::ScatterAdd(self.id, index))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        let v = self.value().slice_cols(start, len);
        self.unary(v, Op::Slice(self.id, start))
    }

    pub fn pad_cols(self, start: usize, total: usize) -> Self {
        let v = self.value().pad_cols(start, total);
        self.unary(v, Op::Pad(self.id, start))
    }
}

impl<'t, T: Scalar> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    fn add(self, rhs: Self) -> Self {
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self {
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self {
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t, T: Scalar> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

/// Gradient of the scalar `output` with respect to `wrt`.
pub fn gradient<'t, T: Scalar>(output: Var<'t, T>, wrt: Var<'t, T>) -> Result<Gradient<'t, T>> {
    let mut g = output.tape().gradients(output, &[wrt])?;
    Ok(g.pop().expect("one gradient per input"))
}
