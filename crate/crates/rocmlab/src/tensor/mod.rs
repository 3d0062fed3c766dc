//! Dense double-precision tensors and a tape-based reverse-mode
//! autodiff engine.
//!
//! [`Tensor`] is a plain value: a shape plus contiguous `f64` storage.
//! Differentiable computation happens on a [`Tape`]: leaves are staged
//! with [`Tape::leaf`] (tracked) or [`Tape::constant`] (untracked), ops
//! on [`Var`] handles record nodes, and [`Var::backward`] sweeps the
//! tape in reverse accumulating gradients into every tracked node.
//!
//! The engine is deliberately small: trailing-dimension broadcasting,
//! 2-D matmul, axis reductions, and the elementwise kernels needed to
//! express an MLP, a sampling trajectory, rewards, and Gaussian
//! divergences as one differentiable graph. No fusion, no in-place
//! mutation of recorded tensors; tapes live for one optimizer step.

mod tape;

pub mod gradcheck;

pub use tape::{backward, elementwise, ElemOp, ReduceOp, Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, row-major.
///
/// Invariant: `shape.iter().product() == data.len()` (empty shape means
/// a scalar holding exactly one value).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![1.0; numel] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; numel] }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a 2-D tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

// ── Broadcasting ─────────────────────────────────────────────────────

/// Broadcast-compatible output shape under trailing-dimension
/// alignment (a missing or size-1 dimension stretches).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for r in 0..ndim {
        // r counts dimensions from the right
        let da = if r < a.len() { a[a.len() - 1 - r] } else { 1 };
        let db = if r < b.len() { b[b.len() - 1 - r] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[ndim - 1 - r] = da.max(db);
        } else {
            return Err(Error::Shape(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                a, b
            )));
        }
    }
    Ok(out)
}

/// Index of the element of `shape` that a position in the broadcast
/// output maps to.
pub(crate) fn broadcast_src_index(out_coords: &[usize], shape: &[usize]) -> usize {
    let ndim_out = out_coords.len();
    let ndim = shape.len();
    let mut idx = 0;
    let mut stride = 1;
    for d in (0..ndim).rev() {
        let out_d = ndim_out - (ndim - d);
        let c = if shape[d] == 1 { 0 } else { out_coords[out_d] };
        idx += c * stride;
        stride *= shape[d];
    }
    idx
}

/// Iterate coordinates of `shape` in row-major order.
pub(crate) fn for_each_coord(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

/// Sum `grad` (shaped like `from`) down to `to` by collapsing broadcast
/// dimensions.
pub(crate) fn unbroadcast(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let numel_to: usize = to.iter().product();
    let mut out = vec![0.0; numel_to];
    for_each_coord(from, |flat, coords| {
        out[broadcast_src_index(coords, to)] += grad[flat];
    });
    out
}

/// Raw 2-D matrix product: A[m×k] · B[k×n] → C[m×n].
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}
