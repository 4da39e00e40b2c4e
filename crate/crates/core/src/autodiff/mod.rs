//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! A [`Tape`] records every primitive in execution order. Values live on the
//! tape and are addressed by copyable [`Var`] handles; [`Tape::backward`]
//! walks the record once in reverse and returns a [`Gradients`] table.
//! Tensors are rank 0, 1 or 2 and stored row-major.

mod adam;
mod checkpoint;
mod params;

use std::cell::{Ref, RefCell};

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{orthogonal, xavier_uniform, ParamStore, Parameter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("parameter/state mismatch: {0}")]
    ParameterMismatch(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.len() > 2 {
            return Err(AutodiffError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(rows, cols)`, treating vectors as a single row.
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank > 2"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVector(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    RowSum(Var),
    SoftmaxCrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize, end: usize },
    NormalizeRows { input: Var, norms: Vec<f64> },
    GatherRows { input: Var, index: Vec<usize> },
    ScatterAddRows { input: Var, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations, in topological (execution) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every recorded value that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂output/∂var`, or `None` when `var` does not influence the output or
    /// does not require a gradient.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0].as_ref().map(|g| Tensor {
            shape: self.shapes[var.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient data, zero-filled when absent.
    pub fn get_or_zeros(&self, var: Var) -> Vec<f64> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.0].iter().product()],
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `out (n×m) += a (n×k) · b (k×m)`, all row-major.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(n, k, m, a, (k, 1), b, (m, 1), out);
}

/// `out (n×k) += g (n×m) · bᵀ` where `b` is k×m.
fn matmul_nt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(n, m, k, g, (m, 1), b, (1, m), out);
}

/// `out (k×m) += aᵀ · g` where `a` is n×k and `g` is n×m.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    gemm(k, n, m, a, (1, k), g, (m, 1), out);
}

/// `c (m×n, row-major) += a (m×k) · b (k×n)` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access for these shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape.clone()
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| f(v)).collect(),
            }
        };
        let rg = self.requires(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape != bv.shape {
                return Err(shape_err(name, av, bv));
            }
            Tensor {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
                return Err(shape_err("matmul", av, bv));
            }
            let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
            let mut out = vec![0.0; n * m];
            matmul_nn(&av.data, &bv.data, n, k, m, &mut out);
            Tensor {
                shape: vec![n, m],
                data: out,
            }
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 {
                return Err(shape_err("transpose", xv, xv));
            }
            let (r, c) = (xv.shape[0], xv.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xv.data[i * c + j];
                }
            }
            Tensor {
                shape: vec![c, r],
                data: out,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x (n×m) + row (m)` broadcast over rows; the bias-add of a dense layer.
    pub fn add_row_vector(&self, x: Var, row: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, rv) = (&nodes[x.0].value, &nodes[row.0].value);
            let (_, m) = xv.dims2();
            if xv.shape.len() != 2 || rv.shape != [m] {
                return Err(shape_err("add_row_vector", xv, rv));
            }
            let mut data = xv.data.clone();
            for chunk in data.chunks_mut(m) {
                for (d, b) in chunk.iter_mut().zip(&rv.data) {
                    *d += b;
                }
            }
            Tensor {
                shape: xv.shape.clone(),
                data,
            }
        };
        let rg = self.requires(&[x, row]);
        Ok(self.push(value, Op::AddRowVector(x, row), rg))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    fn reduce(&self, x: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let value = Tensor::scalar(f(&self.nodes.borrow()[x.0].value.data));
        let rg = self.requires(&[x]);
        self.push(value, op, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        self.reduce(x, |d| d.iter().sum(), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        self.reduce(x, |d| d.iter().sum::<f64>() / d.len() as f64, Op::Mean(x))
    }

    /// `Σ x²`.
    pub fn l2_norm_squared(&self, x: Var) -> Var {
        self.reduce(x, |d| d.iter().map(|v| v * v).sum(), Op::SumSquares(x))
    }

    /// Per-row sums: `n×m → n`.
    pub fn row_sum(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 {
                return Err(shape_err("row_sum", xv, xv));
            }
            let m = xv.shape[1];
            Tensor::vector(xv.data.chunks(m).map(|r| r.iter().sum()).collect())
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::RowSum(x), rg))
    }

    /// Mean over rows of `−log softmax(logits_i)[targets_i]`, using a max shift.
    pub fn softmax_cross_entropy_rows(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if lv.shape.len() != 2 || lv.shape[0] != targets.len() {
                return Err(AutodiffError::Shape {
                    op: "softmax_cross_entropy_rows",
                    left: lv.shape.clone(),
                    right: vec![targets.len()],
                });
            }
            let (n, c) = (lv.shape[0], lv.shape[1]);
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for (i, &target) in targets.iter().enumerate() {
                if target >= c {
                    return Err(AutodiffError::Index { index: target, len: c });
                }
                let row = &lv.data[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_denom = denom.ln();
                for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = (v - max).exp() / denom;
                }
                loss += log_denom - (row[target] - max);
            }
            (loss / n as f64, probs)
        };
        let rg = self.requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let rows = first.dims2().0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.shape.len() != 2 || v.shape[0] != rows {
                    return Err(shape_err("concat_cols", first, v));
                }
                widths.push(v.shape[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data[i * w..(i + 1) * w]);
                }
            }
            Tensor {
                shape: vec![rows, total],
                data,
            }
        };
        let rg = self.requires(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 || start > end || end > xv.shape[1] {
                return Err(AutodiffError::Shape {
                    op: "slice_cols",
                    left: xv.shape.clone(),
                    right: vec![start, end],
                });
            }
            let (r, c) = (xv.shape[0], xv.shape[1]);
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&xv.data[i * c + start..i * c + end]);
            }
            Tensor {
                shape: vec![r, end - start],
                data,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::SliceCols { input: x, start, end }, rg))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 {
                return Err(shape_err("normalize_rows", xv, xv));
            }
            let m = xv.shape[1];
            let mut norms = Vec::with_capacity(xv.shape[0]);
            let mut data = xv.data.clone();
            for (row, chunk) in data.chunks_mut(m).enumerate() {
                let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) {
                    return Err(AutodiffError::ZeroNormRow { row });
                }
                chunk.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (
                Tensor {
                    shape: xv.shape.clone(),
                    data,
                },
                norms,
            )
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::NormalizeRows { input: x, norms }, rg))
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 {
                return Err(shape_err("gather_rows", xv, xv));
            }
            let (r, c) = (xv.shape[0], xv.shape[1]);
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= r {
                    return Err(AutodiffError::Index { index: i, len: r });
                }
                data.extend_from_slice(&xv.data[i * c..(i + 1) * c]);
            }
            Tensor {
                shape: vec![index.len(), c],
                data,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `out[index[i]] += x[i]` into `rows` output rows.
    pub fn scatter_add_rows(&self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape.len() != 2 || xv.shape[0] != index.len() {
                return Err(AutodiffError::Shape {
                    op: "scatter_add_rows",
                    left: xv.shape.clone(),
                    right: vec![index.len()],
                });
            }
            let c = xv.shape[1];
            let mut data = vec![0.0; rows * c];
            for (i, &target) in index.iter().enumerate() {
                if target >= rows {
                    return Err(AutodiffError::Index { index: target, len: rows });
                }
                for (o, v) in data[target * c..(target + 1) * c].iter_mut().zip(&xv.data[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            Tensor {
                shape: vec![rows, c],
                data,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(
            value,
            Op::ScatterAddRows {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Populate `∂output/∂v` for every recorded `v` that requires a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = &nodes[output.0].value.shape;
        if !out_shape.is_empty() {
            return Err(AutodiffError::NonScalarOutput(out_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
                f(slot);
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                    acc(*a, &mut |s| matmul_nt(&g, &bv.data, n, k, m, s));
                    acc(*b, &mut |s| matmul_tn(&av.data, &g, n, k, m, s));
                }
                Op::Transpose(x) => {
                    let (r, c) = (val(*x).shape[0], val(*x).shape[1]);
                    acc(*x, &mut |s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &mut |s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(&bv.data) {
                            *s += g * y;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(&av.data) {
                            *s += g * x;
                        }
                    });
                }
                Op::AddRowVector(x, row) => {
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g));
                    let m = val(*row).data.len();
                    acc(*row, &mut |s| {
                        for chunk in g.chunks(m) {
                            s.iter_mut().zip(chunk).for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::Scale(x, f) => acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(s, g)| *s += g * f)),
                Op::Tanh(x) => acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(&g).zip(&node.value.data) {
                        *s += g * (1.0 - y * y);
                    }
                }),
                Op::Sigmoid(x) => acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(&g).zip(&node.value.data) {
                        *s += g * y * (1.0 - y);
                    }
                }),
                Op::Relu(x) => {
                    let xv = val(*x);
                    acc(*x, &mut |s| {
                        for ((s, g), v) in s.iter_mut().zip(&g).zip(&xv.data) {
                            if *v > 0.0 {
                                *s += g;
                            }
                        }
                    });
                }
                Op::Exp(x) => acc(*x, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(&g).zip(&node.value.data) {
                        *s += g * y;
                    }
                }),
                Op::Log(x) => {
                    let xv = val(*x);
                    acc(*x, &mut |s| {
                        for ((s, g), v) in s.iter_mut().zip(&g).zip(&xv.data) {
                            *s += g / v;
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
                Op::Mean(x) => {
                    let n = val(*x).data.len() as f64;
                    acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
                }
                Op::SumSquares(x) => {
                    let xv = val(*x);
                    acc(*x, &mut |s| {
                        for (s, v) in s.iter_mut().zip(&xv.data) {
                            *s += 2.0 * g[0] * v;
                        }
                    });
                }
                Op::RowSum(x) => {
                    let m = val(*x).shape[1];
                    acc(*x, &mut |s| {
                        for (chunk, gi) in s.chunks_mut(m).zip(&g) {
                            chunk.iter_mut().for_each(|s| *s += gi);
                        }
                    });
                }
                Op::SoftmaxCrossEntropyRows { logits, targets, probs } => {
                    let n = targets.len();
                    let c = probs.len() / n.max(1);
                    let scale = g[0] / n as f64;
                    acc(*logits, &mut |s| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                s[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).shape[1];
                        acc(*p, &mut |s| {
                            for (i, chunk) in s.chunks_mut(w).enumerate() {
                                let src = &g[i * total + offset..i * total + offset + w];
                                chunk.iter_mut().zip(src).for_each(|(s, g)| *s += g);
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols { input, start, end } => {
                    let c = val(*input).shape[1];
                    let w = end - start;
                    acc(*input, &mut |s| {
                        for (i, gi) in g.chunks(w).enumerate() {
                            s[i * c + start..i * c + end].iter_mut().zip(gi).for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::NormalizeRows { input, norms } => {
                    let m = node.value.shape[1];
                    acc(*input, &mut |s| {
                        for (i, &norm) in norms.iter().enumerate() {
                            let y = &node.value.data[i * m..(i + 1) * m];
                            let gi = &g[i * m..(i + 1) * m];
                            let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                            for j in 0..m {
                                s[i * m + j] += (gi[j] - y[j] * dot) / norm;
                            }
                        }
                    });
                }
                Op::GatherRows { input, index } => {
                    let c = node.value.shape[1];
                    acc(*input, &mut |s| {
                        for (i, &src) in index.iter().enumerate() {
                            s[src * c..(src + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::ScatterAddRows { input, index } => {
                    let c = node.value.shape[1];
                    acc(*input, &mut |s| {
                        for (i, &dst) in index.iter().enumerate() {
                            s[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[dst * c..(dst + 1) * c])
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests;
