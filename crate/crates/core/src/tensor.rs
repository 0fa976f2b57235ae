//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! record holding its output value, its inputs and whatever intermediates its
//! backward rule needs. Records are appended in evaluation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Tensors of rank > 1 are viewed as `rows × cols` where `cols` is the last
//! dimension. Broadcasting is limited to a trailing-dimension bias add and
//! multiplication by a scalar.

use alloc::{string::String, vec, vec::Vec};

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `rows × cols` view of a shape: cols is the last dimension.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&c) => (numel(&shape[..shape.len() - 1]), c),
    }
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(alloc::format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn rows(&self) -> usize {
        rows_cols(&self.shape).0
    }

    pub fn cols(&self) -> usize {
        rows_cols(&self.shape).1
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. No-op unless `requires_grad`.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    ClampMax(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatLast(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Diagonal(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::ClampMax(..) => "clamp_max",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::ConcatLast(..) => "concat_last",
            Op::StackRows(..) => "stack_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Row(..) => "row",
            Op::Gather { .. } => "gather",
            Op::Diagonal(..) => "diagonal",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::ClampMax(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Row(a, _)
            | Op::Diagonal(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::L2NormalizeRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatLast(v) | Op::StackRows(v) => v.clone(),
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Read-only view of one tape record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Computation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Mutable access, used by test hooks that corrupt an analytic gradient.
    pub fn get_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        self.grads.get_mut(v.0).and_then(|g| g.as_deref_mut())
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + math::erf(x / math::SQRT_2))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| Record {
            op: n.op.name(),
            inputs: n.op.inputs(),
            output: Var(i),
        })
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it takes part in differentiation when
    /// the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: Vec::new(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = gemm(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("transpose", a)?;
        let out = transpose_raw(self.value(a), m, n);
        Ok(self.push(vec![n, m], out, Op::Transpose(a)))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rc(x);
        if numel(self.shape(bias)) != c {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor)))
    }

    /// Multiplies every entry of `x` by the single entry of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::Shape {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * f).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| math::exp(*v)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Exp(x)))
    }

    /// `min(x, max)`; entries above `max` pass no gradient.
    pub fn clamp_max(&mut self, x: Var, max: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v.min(max)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::ClampMax(x, max)))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * gelu_cdf(*v)).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax_rows", x)?;
        let (r, c) = self.rc(x);
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = math::exp(v - max);
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax_rows", x)?;
        let (r, c) = self.rc(x);
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            for (d, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmaxRows(x)))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(alloc::format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (r, c) = self.rc(x);
        for p in [gain, bias] {
            if numel(self.shape(p)) != c {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm; an all-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let src = self.value(x);
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            norms[i] = n;
            if n > 0.0 {
                for (d, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *d = v / n;
                }
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::L2NormalizeRows { x, norms }))
    }

    /// Concatenates along the last axis. All inputs must agree on the
    /// leading dimensions.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_last of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let (rows, _) = self.rc(first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(TensorError::Shape {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += self.rc(p).1;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let (_, c) = self.rc(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatLast(parts.to_vec())))
    }

    /// Stacks vectors `[d]` or matrices `[r×d]` vertically into `[Σr×d]`.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("stack_rows of nothing".into()))?;
        let (_, c) = self.rc(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.rc(p);
            if pc != c || self.shape(p).len() > 2 {
                return Err(TensorError::Shape {
                    op: "stack_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::StackRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.require_2d("slice_cols", x)?;
        if width == 0 || start + width > c {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, width],
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        Ok(self.push(vec![r, width], out, Op::SliceCols { x, start }))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = self.require_2d("row", x)?;
        if index >= r {
            return Err(TensorError::Shape {
                op: "row",
                lhs: self.shape(x).to_vec(),
                rhs: vec![index],
            });
        }
        let out = self.value(x)[index * c..(index + 1) * c].to_vec();
        Ok(self.push(vec![c], out, Op::Row(x, index)))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.require_2d("gather", table)?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Shape {
                    op: "gather",
                    lhs: self.shape(table).to_vec(),
                    rhs: vec![id],
                });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d("diagonal", x)?;
        if r != c {
            return Err(TensorError::Shape {
                op: "diagonal",
                lhs: self.shape(x).to_vec(),
                rhs: Vec::new(),
            });
        }
        let out = (0..r).map(|i| self.value(x)[i * c + i]).collect();
        Ok(self.push(vec![r], out, Op::Diagonal(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        Ok(self.push(vec![1], vec![s], Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        Ok(self.push(vec![1], vec![s], Op::MeanAll(x)))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over fan-out; every differentiable leaf gets a buffer, zero when the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let send = |v: Var, delta: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let (_, n) = self.rc(*b);
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da, grads);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * x;
                            }
                        }
                    }
                    send(*b, db, grads);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.rc(*a);
                send(*a, transpose_raw(g, n, m), grads);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect(), grads);
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect(), grads);
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    db[i % c] += v;
                }
                send(*x, g.to_vec(), grads);
                send(*bias, db, grads);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect(), grads),
            Op::ScaleBy(x, s) => {
                let f = self.value(*s)[0];
                let xv = self.value(*x);
                send(*x, g.iter().map(|v| v * f).collect(), grads);
                let ds: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                send(*s, vec![ds], grads);
            }
            Op::Exp(x) => {
                send(*x, g.iter().zip(&node.value).map(|(a, y)| a * y).collect(), grads);
            }
            Op::ClampMax(x, max) => {
                let xv = self.value(*x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(a, v)| if *v > *max { 0.0 } else { *a })
                    .collect();
                send(*x, d, grads);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(a, v)| {
                        let pdf = math::INV_SQRT_2PI * math::exp(-0.5 * v * v);
                        a * (gelu_cdf(*v) + v * pdf)
                    })
                    .collect();
                send(*x, d, grads);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = self.rc(*x);
                let y = &node.value;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                send(*x, d, grads);
            }
            Op::LogSoftmaxRows(x) => {
                let (r, c) = self.rc(*x);
                let y = &node.value;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gs = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gs[j] - math::exp(y[i * c + j]) * gsum;
                    }
                }
                send(*x, d, grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = self.rc(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let gij = g[i * c + j];
                        let h = xhat[i * c + j];
                        dg[j] += gij * h;
                        dbias[j] += gij;
                        let dh = gij * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h;
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let h = xhat[i * c + j];
                        let dh = g[i * c + j] * gv[j];
                        dx[i * c + j] = rstd[i] * (dh - mean_dh - h * mean_dh_h);
                    }
                }
                send(*x, dx, grads);
                send(*gain, dg, grads);
                send(*bias, dbias, grads);
            }
            Op::L2NormalizeRows { x, norms } => {
                let (r, c) = self.rc(*x);
                let y = &node.value;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let ys = &y[i * c..(i + 1) * c];
                    let gs = &g[i * c..(i + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = (gs[j] - ys[j] * dot) / norms[i];
                    }
                }
                send(*x, d, grads);
            }
            Op::ConcatLast(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.rc(p);
                    let mut d = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    send(p, d, grads);
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, g[offset..offset + len].to_vec(), grads);
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.rc(*x);
                let width = node.shape[1];
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + width]
                        .copy_from_slice(&g[i * width..(i + 1) * width]);
                }
                send(*x, d, grads);
            }
            Op::Row(x, index) => {
                let (r, c) = self.rc(*x);
                let mut d = vec![0.0; r * c];
                d[index * c..(index + 1) * c].copy_from_slice(g);
                send(*x, d, grads);
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.rc(*table);
                let mut dt = vec![0.0; v * d];
                for (k, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
                send(*table, dt, grads);
            }
            Op::Diagonal(x) => {
                let (r, c) = self.rc(*x);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + i] = g[i];
                }
                send(*x, d, grads);
            }
            Op::Reshape(x) => send(*x, g.to_vec(), grads),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0]; n], grads);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n], grads);
            }
        }
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` rebuilds its graph on a fresh tape from the given parameter leaves and
/// returns a scalar. Returns the maximum over all coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`. `f` must be smooth at
/// `params`; kinks such as `|x|` at 0 give meaningless results.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(f, params, eps, |_, _| {})
}

/// Same as [`finite_difference_check`], with a hook that can edit the
/// analytic gradients before comparison (used for negative controls).
pub fn finite_difference_check_with<F, H>(
    f: F,
    params: &[Tensor],
    eps: f64,
    mut hook: H,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnMut(&[Var], &mut Gradients),
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::Invalid(alloc::format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok(v)
    };

    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| p.clone().with_requires_grad(true))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_difference_check",
        });
    }
    let mut grads = tape.backward(out)?;
    hook(&vars, &mut grads);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_default();
        for j in 0..work[pi].len() {
            let orig = work[pi].data[j];
            work[pi].data[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(j).copied().unwrap_or(0.0);
            let err = math::abs(a - numeric) / f64::max(1.0, math::abs(a));
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
