//! Operation tape and differentiable variables.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in
//! topological order. [`backward`] sweeps the records in reverse once,
//! pushing gradients from a scalar loss into every tracked node.
//! Gradients accumulate across backward calls until [`Tape::zero_grads`].

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::{broadcast_shape, broadcast_src_index, for_each_coord, matmul_raw, unbroadcast, Tensor};

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Square,
    Sqrt,
    Neg,
}

impl ElemOp {
    fn is_binary(self) -> bool {
        matches!(self, ElemOp::Add | ElemOp::Sub | ElemOp::Mul | ElemOp::Div)
    }
}

/// Reduction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

enum Record {
    Leaf,
    Elem { kind: ElemOp, a: usize, b: Option<usize> },
    // value = scale * a + shift, elementwise
    Affine { a: usize, scale: f64 },
    Clamp { a: usize, lo: f64, hi: f64 },
    Matmul { a: usize, b: usize },
    Reduce { kind: ReduceOp, a: usize, axes: Vec<usize> },
    // column-wise concatenation of 2-D inputs with equal row counts
    ConcatCols { inputs: Vec<usize> },
}

struct Node {
    record: Record,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    nodes: Vec<Node>,
}

/// A recording tape. Cheap to clone (shared handle); create one per
/// optimizer step and drop it afterwards.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one recorded tensor on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<TapeInner>>,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> Var {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(node);
        Var { tape: Rc::clone(&self.inner), idx }
    }

    /// Stage a tracked leaf (gradients will accumulate here).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node { record: Record::Leaf, value, grad: None, requires_grad: true })
    }

    /// Stage an untracked constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node { record: Record::Leaf, value, grad: None, requires_grad: false })
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reset accumulated gradients on every node.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.idx].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.borrow().nodes[self.idx].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.idx].requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.borrow();
        let node = &inner.nodes[self.idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Re-stage the current value as an untracked constant on the same
    /// tape, cutting the gradient path.
    pub fn detach(&self) -> Var {
        let value = self.value();
        let tape = Tape { inner: Rc::clone(&self.tape) };
        tape.constant(value)
    }

    fn tape_handle(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn assert_same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "vars recorded on different tapes"
        );
    }

    // ── elementwise sugar ────────────────────────────────────────────

    pub fn exp(&self) -> Var {
        elementwise(ElemOp::Exp, self, None).expect("exp")
    }

    pub fn log(&self) -> Result<Var> {
        elementwise(ElemOp::Log, self, None)
    }

    pub fn tanh(&self) -> Var {
        elementwise(ElemOp::Tanh, self, None).expect("tanh")
    }

    pub fn square(&self) -> Var {
        elementwise(ElemOp::Square, self, None).expect("square")
    }

    pub fn sqrt(&self) -> Result<Var> {
        elementwise(ElemOp::Sqrt, self, None)
    }

    /// value = scale * self (elementwise).
    pub fn scale(&self, scale: f64) -> Var {
        let value = {
            let inner = self.tape.borrow();
            let v = &inner.nodes[self.idx].value;
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| scale * x).collect())
                .expect("affine shape")
        };
        let requires_grad = self.requires_grad();
        self.tape_handle().push(Node {
            record: Record::Affine { a: self.idx, scale },
            value,
            grad: None,
            requires_grad,
        })
    }

    /// Clamp values to `[lo, hi]`; gradient passes through inside the
    /// interval and is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = {
            let inner = self.tape.borrow();
            let v = &inner.nodes[self.idx].value;
            Tensor::new(
                v.shape().to_vec(),
                v.data().iter().map(|x| x.clamp(lo, hi)).collect(),
            )
            .expect("clamp shape")
        };
        let requires_grad = self.requires_grad();
        self.tape_handle().push(Node {
            record: Record::Clamp { a: self.idx, lo, hi },
            value,
            grad: None,
            requires_grad,
        })
    }

    // ── matmul and reductions ────────────────────────────────────────

    /// 2-D matrix product `self[m×k] · rhs[k×n]`.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.assert_same_tape(rhs);
        let (value, requires_grad) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[rhs.idx].value;
            if a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "matmul needs 2-D operands, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul inner extents differ: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let data = matmul_raw(a.data(), b.data(), m, k, n);
            (
                Tensor::new(vec![m, n], data)?,
                inner.nodes[self.idx].requires_grad || inner.nodes[rhs.idx].requires_grad,
            )
        };
        Ok(self.tape_handle().push(Node {
            record: Record::Matmul { a: self.idx, b: rhs.idx },
            value,
            grad: None,
            requires_grad,
        }))
    }

    /// Reduce over the given axes (removed from the shape). An empty
    /// axis list leaves the tensor unchanged.
    pub fn reduce(&self, kind: ReduceOp, axes: &[usize]) -> Result<Var> {
        let (value, requires_grad) = {
            let inner = self.tape.borrow();
            let v = &inner.nodes[self.idx].value;
            let shape = v.shape();
            for &ax in axes {
                if ax >= shape.len() {
                    return Err(Error::Shape(format!(
                        "reduce axis {} out of range for shape {:?}",
                        ax, shape
                    )));
                }
            }
            let value = reduce_forward(kind, v, axes);
            (value, inner.nodes[self.idx].requires_grad)
        };
        Ok(self.tape_handle().push(Node {
            record: Record::Reduce { kind, a: self.idx, axes: axes.to_vec() },
            value,
            grad: None,
            requires_grad,
        }))
    }

    /// Sum every element down to a scalar.
    pub fn sum(&self) -> Var {
        let ndim = self.shape().len();
        let axes: Vec<usize> = (0..ndim).collect();
        if axes.is_empty() {
            // already scalar-shaped; record an identity reduce
            return self.reduce(ReduceOp::Sum, &[]).expect("sum");
        }
        self.reduce(ReduceOp::Sum, &axes).expect("sum")
    }

    /// Mean of every element.
    pub fn mean(&self) -> Var {
        let ndim = self.shape().len();
        let axes: Vec<usize> = (0..ndim).collect();
        if axes.is_empty() {
            return self.reduce(ReduceOp::Mean, &[]).expect("mean");
        }
        self.reduce(ReduceOp::Mean, &axes).expect("mean")
    }

    /// Squared L2 norm along axis 1 of a 2-D tensor: `[B,d] → [B]`.
    pub fn row_sq_norm(&self) -> Var {
        self.square().reduce(ReduceOp::Sum, &[1]).expect("row_sq_norm")
    }

    /// Run one reverse sweep from this scalar, accumulating gradients.
    pub fn backward(&self) -> Result<()> {
        backward(self)
    }
}

/// Column-wise concatenation of 2-D vars with equal row counts.
pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
    assert!(!parts.is_empty(), "concat_cols needs at least one input");
    for p in &parts[1..] {
        parts[0].assert_same_tape(p);
    }
    let (value, requires_grad, idxs) = {
        let inner = parts[0].tape.borrow();
        let rows = {
            let s = inner.nodes[parts[0].idx].value.shape();
            if s.len() != 2 {
                return Err(Error::Shape(format!("concat_cols needs 2-D inputs, got {:?}", s)));
            }
            s[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = inner.nodes[p.idx].value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {:?} vs {} rows",
                    s, rows
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut col0 = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = inner.nodes[p.idx].value.data();
            for r in 0..rows {
                data[r * total + col0..r * total + col0 + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            col0 += w;
        }
        (
            Tensor::new(vec![rows, total], data)?,
            parts.iter().any(|p| inner.nodes[p.idx].requires_grad),
            parts.iter().map(|p| p.idx).collect::<Vec<_>>(),
        )
    };
    Ok(parts[0].tape_handle().push(Node {
        record: Record::ConcatCols { inputs: idxs },
        value,
        grad: None,
        requires_grad,
    }))
}

/// Record an elementwise operation. Binary kinds broadcast under
/// trailing-dimension alignment; unary kinds take `b = None`.
pub fn elementwise(kind: ElemOp, a: &Var, b: Option<&Var>) -> Result<Var> {
    if kind.is_binary() != b.is_some() {
        return Err(Error::Contract(format!(
            "{:?} expects {} operands",
            kind,
            if kind.is_binary() { 2 } else { 1 }
        )));
    }
    if let Some(b) = b {
        a.assert_same_tape(b);
    }
    let (value, requires_grad) = {
        let inner = a.tape.borrow();
        let av = &inner.nodes[a.idx].value;
        let value = match b {
            Some(b) => {
                let bv = &inner.nodes[b.idx].value;
                let out_shape = broadcast_shape(av.shape(), bv.shape())?;
                let mut data = vec![0.0; out_shape.iter().product()];
                for_each_coord(&out_shape, |flat, coords| {
                    let x = av.data()[broadcast_src_index(coords, av.shape())];
                    let y = bv.data()[broadcast_src_index(coords, bv.shape())];
                    data[flat] = match kind {
                        ElemOp::Add => x + y,
                        ElemOp::Sub => x - y,
                        ElemOp::Mul => x * y,
                        ElemOp::Div => x / y,
                        _ => unreachable!(),
                    };
                });
                Tensor::new(out_shape, data)?
            }
            None => {
                if matches!(kind, ElemOp::Log | ElemOp::Sqrt) {
                    if let Some(bad) = av.data().iter().find(|x| **x < 0.0) {
                        return Err(Error::Domain(format!(
                            "{:?} of negative input {}",
                            kind, bad
                        )));
                    }
                }
                let data = av
                    .data()
                    .iter()
                    .map(|&x| match kind {
                        ElemOp::Exp => x.exp(),
                        ElemOp::Log => x.ln(),
                        ElemOp::Tanh => x.tanh(),
                        ElemOp::Square => x * x,
                        ElemOp::Sqrt => x.sqrt(),
                        ElemOp::Neg => -x,
                        _ => unreachable!(),
                    })
                    .collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
        };
        let rg = inner.nodes[a.idx].requires_grad
            || b.map(|b| inner.nodes[b.idx].requires_grad).unwrap_or(false);
        (value, rg)
    };
    Ok(a.tape_handle().push(Node {
        record: Record::Elem { kind, a: a.idx, b: b.map(|b| b.idx) },
        value,
        grad: None,
        requires_grad,
    }))
}

fn reduce_forward(kind: ReduceOp, v: &Tensor, axes: &[usize]) -> Tensor {
    if axes.is_empty() {
        return v.clone();
    }
    let shape = v.shape();
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect();
    let mut data = vec![0.0; out_shape.iter().product::<usize>().max(1)];
    let count: usize = axes.iter().map(|&d| shape[d]).product();
    for_each_coord(shape, |flat, coords| {
        data[reduced_index(coords, shape, axes)] += v.data()[flat];
    });
    if kind == ReduceOp::Mean {
        for x in &mut data {
            *x /= count as f64;
        }
    }
    Tensor::new(out_shape, data).expect("reduce shape")
}

fn reduced_index(coords: &[usize], shape: &[usize], axes: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        if axes.contains(&d) {
            continue;
        }
        idx += coords[d] * stride;
        stride *= shape[d];
    }
    idx
}

/// Reverse sweep from a scalar loss. Every tracked node reachable from
/// `loss` receives (accumulates) its gradient; untracked nodes are
/// skipped entirely.
pub fn backward(loss: &Var) -> Result<()> {
    let mut inner = loss.tape.borrow_mut();
    let nodes = &mut inner.nodes;
    if nodes[loss.idx].value.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.idx].value.shape()
        )));
    }
    if !nodes[loss.idx].requires_grad {
        return Ok(()); // constant loss: nothing to do
    }

    // scratch gradients for this sweep only; persistent node.grad
    // accumulates across sweeps
    let mut scratch: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
    scratch[loss.idx] = Some(vec![1.0]);

    for idx in (0..=loss.idx).rev() {
        if !nodes[idx].requires_grad {
            continue;
        }
        let Some(gout) = scratch[idx].take() else { continue };

        // local rules: add contribution into each tracked input
        match &nodes[idx].record {
            Record::Leaf => {}
            Record::Elem { kind, a, b } => {
                let a = *a;
                let out_shape = nodes[idx].value.shape().to_vec();
                match b {
                    Some(b) => {
                        let b = *b;
                        let a_shape = nodes[a].value.shape().to_vec();
                        let b_shape = nodes[b].value.shape().to_vec();
                        let mut ga = vec![0.0; gout.len()];
                        let mut gb = vec![0.0; gout.len()];
                        {
                            let adata = nodes[a].value.data();
                            let bdata = nodes[b].value.data();
                            for_each_coord(&out_shape, |flat, coords| {
                                let x = adata[broadcast_src_index(coords, &a_shape)];
                                let y = bdata[broadcast_src_index(coords, &b_shape)];
                                let g = gout[flat];
                                match kind {
                                    ElemOp::Add => {
                                        ga[flat] = g;
                                        gb[flat] = g;
                                    }
                                    ElemOp::Sub => {
                                        ga[flat] = g;
                                        gb[flat] = -g;
                                    }
                                    ElemOp::Mul => {
                                        ga[flat] = g * y;
                                        gb[flat] = g * x;
                                    }
                                    ElemOp::Div => {
                                        ga[flat] = g / y;
                                        gb[flat] = -g * x / (y * y);
                                    }
                                    _ => unreachable!(),
                                }
                            });
                        }
                        if nodes[a].requires_grad {
                            let ga = unbroadcast(&ga, &out_shape, &a_shape);
                            add_into(&mut scratch[a], &ga);
                        }
                        if nodes[b].requires_grad {
                            let gb = unbroadcast(&gb, &out_shape, &b_shape);
                            add_into(&mut scratch[b], &gb);
                        }
                    }
                    None => {
                        if nodes[a].requires_grad {
                            let adata = nodes[a].value.data();
                            let outdata = nodes[idx].value.data();
                            let ga: Vec<f64> = gout
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| match kind {
                                    ElemOp::Exp => g * outdata[i],
                                    ElemOp::Log => g / adata[i],
                                    ElemOp::Tanh => g * (1.0 - outdata[i] * outdata[i]),
                                    ElemOp::Square => g * 2.0 * adata[i],
                                    ElemOp::Sqrt => g / (2.0 * outdata[i]),
                                    ElemOp::Neg => -g,
                                    _ => unreachable!(),
                                })
                                .collect();
                            add_into(&mut scratch[a], &ga);
                        }
                    }
                }
            }
            Record::Affine { a, scale } => {
                let (a, scale) = (*a, *scale);
                if nodes[a].requires_grad {
                    let ga: Vec<f64> = gout.iter().map(|g| g * scale).collect();
                    add_into(&mut scratch[a], &ga);
                }
            }
            Record::Clamp { a, lo, hi } => {
                let (a, lo, hi) = (*a, *lo, *hi);
                if nodes[a].requires_grad {
                    let adata = nodes[a].value.data();
                    let ga: Vec<f64> = gout
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| if adata[i] >= lo && adata[i] <= hi { g } else { 0.0 })
                        .collect();
                    add_into(&mut scratch[a], &ga);
                }
            }
            Record::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                let n = nodes[b].value.shape()[1];
                if nodes[a].requires_grad {
                    // dA = dC · Bᵀ
                    let bt = transpose(nodes[b].value.data(), k, n);
                    let ga = matmul_raw(&gout, &bt, m, n, k);
                    add_into(&mut scratch[a], &ga);
                }
                if nodes[b].requires_grad {
                    // dB = Aᵀ · dC
                    let at = transpose(nodes[a].value.data(), m, k);
                    let gb = matmul_raw(&at, &gout, k, m, n);
                    add_into(&mut scratch[b], &gb);
                }
            }
            Record::Reduce { kind, a, axes } => {
                let a = *a;
                if nodes[a].requires_grad {
                    let in_shape = nodes[a].value.shape().to_vec();
                    let ga = if axes.is_empty() {
                        gout.clone()
                    } else {
                        let count: usize = axes.iter().map(|&d| in_shape[d]).product();
                        let scale = match kind {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / count as f64,
                        };
                        let mut ga = vec![0.0; nodes[a].value.numel()];
                        for_each_coord(&in_shape, |flat, coords| {
                            ga[flat] = gout[reduced_index(coords, &in_shape, axes)] * scale;
                        });
                        ga
                    };
                    add_into(&mut scratch[a], &ga);
                }
            }
            Record::ConcatCols { inputs } => {
                let inputs = inputs.clone();
                let total = nodes[idx].value.shape()[1];
                let rows = nodes[idx].value.shape()[0];
                let mut col0 = 0;
                for p in inputs {
                    let w = nodes[p].value.shape()[1];
                    if nodes[p].requires_grad {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + col0..r * total + col0 + w]);
                        }
                        add_into(&mut scratch[p], &gp);
                    }
                    col0 += w;
                }
            }
        }

        // fold this sweep's gradient into the persistent accumulator
        match &mut nodes[idx].grad {
            Some(acc) => {
                for (g, s) in acc.iter_mut().zip(&gout) {
                    *g += s;
                }
            }
            None => nodes[idx].grad = Some(gout),
        }
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ── operator sugar ───────────────────────────────────────────────────

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                elementwise($kind, self, Some(rhs)).expect(stringify!($method))
            }
        }
        impl $trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                (&self).$method(&rhs)
            }
        }
        impl $trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                (&self).$method(rhs)
            }
        }
        impl $trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                self.$method(&rhs)
            }
        }
    };
}

impl_binop!(Add, add, ElemOp::Add);
impl_binop!(Sub, sub, ElemOp::Sub);
impl_binop!(Mul, mul, ElemOp::Mul);
impl_binop!(Div, div, ElemOp::Div);

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        elementwise(ElemOp::Neg, self, None).expect("neg")
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        -&self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn add_vectors() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = &a + &b;
        assert_eq!(c.value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]));
        let ones = tape.constant(Tensor::ones(&[3]));
        let y = &x * &ones;
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn exp_log_inverse_pair() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.5]));
        let y = x.log().unwrap().exp();
        assert_relative_eq!(y.value().data()[0], 2.5, max_relative = 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = elementwise(ElemOp::Add, &a, Some(&b)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0]));
        assert!(matches!(x.log(), Err(Error::Domain(_))));
        assert!(matches!(x.sqrt(), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = i2.matmul(&a).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let col = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 5.0]).unwrap());
        let z = r.matmul(&col).unwrap();
        assert_eq!(z.value().data(), &[0.0]);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(x.sum().item(), 6.0);
        let y = tape.leaf(Tensor::vector(vec![2.0, 4.0]));
        assert_eq!(y.mean().item(), 3.0);
        // empty axis list: unchanged
        let z = x.reduce(ReduceOp::Sum, &[]).unwrap();
        assert_eq!(z.value().data(), x.value().data());
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_is_noop() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(7.0));
        assert!(c.backward().is_ok());
        assert!(c.grad().is_none());
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let loss = x.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[12.0]);
        tape.zero_grads();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn untracked_leaf_never_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let c = tape.constant(Tensor::vector(vec![5.0]));
        let loss = (&x * &c).sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn matmul_grad_of_sum_is_column_sums() {
        // d/dA sum(A·B) = row-broadcast of B's column sums
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let g = a.grad().unwrap();
        assert_eq!(g.data(), &[6.0, 15.0, 6.0, 15.0]);
    }

    #[test]
    fn broadcast_add_bias_grad() {
        // [2,3] + [3] bias: bias grad is the column sums of gout
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = (&x + &b).sum();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_cuts_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = x.square();
        let z = y.detach();
        let loss = (&z * &z).sum();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(z.value().data(), &[4.0]);
    }

    #[test]
    fn clamp_gradient_mask() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-2.0, 0.5, 2.0]));
        let loss = x.clamp(-1.0, 1.0).sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.value().shape(), &[2, 3]);
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]).unwrap());
        let loss = (&c * &w).sum();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
    }

    #[test]
    fn backward_linearity() {
        // grad(a·f + b·g) = a·grad(f) + b·grad(g)
        let run = |wa: f64, wb: f64| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.7, -1.3]));
            let f = x.square().sum();
            let g = x.tanh().sum();
            let loss = f.scale(wa) + g.scale(wb);
            loss.backward().unwrap();
            x.grad().unwrap().into_data()
        };
        let gf = run(1.0, 0.0);
        let gg = run(0.0, 1.0);
        let gboth = run(2.0, -3.0);
        for i in 0..2 {
            assert_relative_eq!(gboth[i], 2.0 * gf[i] - 3.0 * gg[i], max_relative = 1e-12);
        }
    }
}
