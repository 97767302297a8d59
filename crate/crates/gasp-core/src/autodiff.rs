//! Reverse-mode automatic differentiation on an explicit single-threaded
//! tape.
//!
//! The tape records every forward operation with references to its parent
//! nodes; `backward` walks the records in exact reverse order, so every
//! node's parents are visited after it and gradients are exact reverse-mode
//! accumulations. Everything is double precision and loop orders are fixed,
//! which makes gradients bit-identical across runs of the same graph.
//!
//! Shapes are explicit two-dimensional (rows x cols); the only broadcasts
//! are rowwise (`add_row`, `mul_row`) and scalar (`scale`, `add_scalar`).
//! Attention is a single fused node that stores only the softmax matrix
//! and streams its backward row by row, which bounds tape memory by the
//! attention matrix instead of its intermediates.
//!
//! Any operation that produces a NaN or infinity reports `NonFinite`
//! instead of letting the value propagate.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::{matmul, matmul_nt, matmul_tn};
use crate::rng::rng_from_seed;
use crate::scalar;

/// Stabilizer added to the variance inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Minimum row norm before `l2_normalize_rows` switches to a linear map.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        op: &'static str,
        detail: &'static str,
    },
    #[error("loss must be a 1x1 tensor")]
    NonScalarLoss,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("temperature must be positive")]
    InvalidTemperature,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {0} is already registered")]
    DuplicateParam(String),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
}

fn ensure(cond: bool, op: &'static str, detail: &'static str) -> Result<(), DiffError> {
    if cond {
        Ok(())
    } else {
        Err(DiffError::Shape { op, detail })
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<(), DiffError> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

/// Dense row-major matrix of doubles. Used both for tape values and for
/// stored parameters; the gradient buffer is populated only on parameters
/// that require gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, DiffError> {
        ensure(values.len() == rows * cols, "from_values", "value count")?;
        Ok(Self {
            rows,
            cols,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_values(1, 1, vec![x]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.fill(0.0),
                None => self.grad = Some(vec![0.0; self.values.len()]),
            }
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64], scale: f64) {
        debug_assert_eq!(delta.len(), self.values.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (dst, &d) in g.iter_mut().zip(delta) {
            *dst += scale * d;
        }
    }
}

/// Optimizer grouping of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    /// Correspondence-head weights; trained at a boosted learning rate.
    Head,
    /// Low-rank adapter factors on the attention projections.
    Lora,
    /// Everything else trainable: embeddings, MLPs, norms, input/output
    /// projections.
    Other,
    /// Frozen weights; never updated and never given gradients.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamMeta {
    pub group: ParamGroup,
    /// Whether weight decay applies; biases, norms, and embeddings opt
    /// out.
    pub weight_decay: bool,
}

/// Named parameter registry with a stable registration order, which fixes
/// checkpoint layout and optimizer iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    metas: Vec<ParamMeta>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        mut tensor: Tensor,
        meta: ParamMeta,
    ) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_string()));
        }
        tensor.requires_grad = meta.group != ParamGroup::Frozen;
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.metas.push(meta);
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn meta(&self, id: ParamId) -> ParamMeta {
        self.metas[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Parameters in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn scalars_in_group(&self, group: ParamGroup) -> usize {
        self.metas
            .iter()
            .zip(&self.tensors)
            .filter(|(m, _)| m.group == group)
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Attention visibility pattern. Allowed keys for a query row always form
/// a prefix of the key sequence, which keeps the inner loops contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query attends to every key.
    Full,
    /// The first `n_vis` rows attend only among themselves; rows after
    /// that see the whole first block plus their own causal prefix.
    PrefixLm { n_vis: usize },
}

impl AttnMask {
    fn row_limit(self, row: usize, n_keys: usize) -> usize {
        match self {
            AttnMask::Full => n_keys,
            AttnMask::PrefixLm { n_vis } => {
                if row < n_vis {
                    n_vis
                } else {
                    row + 1
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NodeRef(usize);

enum Op {
    Input,
    Param(ParamId),
    Matmul(NodeRef, NodeRef),
    MatmulNt(NodeRef, NodeRef),
    MatmulTn(NodeRef, NodeRef),
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    Div(NodeRef, NodeRef),
    AddRow(NodeRef, NodeRef),
    MulRow(NodeRef, NodeRef),
    Scale(NodeRef, f64),
    AddScalar(NodeRef),
    Abs(NodeRef),
    Log(NodeRef),
    Exp(NodeRef),
    Softmax(NodeRef),
    Gelu(NodeRef),
    LayerNorm(NodeRef),
    L2NormRows(NodeRef),
    RowLogSumExp(NodeRef),
    Sum(NodeRef),
    Mean(NodeRef),
    Transpose(NodeRef),
    SliceRows(NodeRef, usize),
    SliceCols(NodeRef, usize),
    ConcatCols(Vec<NodeRef>),
    ConcatRows(NodeRef, NodeRef),
    GatherRows(NodeRef, Rc<Vec<usize>>),
    GatherEntries(NodeRef, Rc<Vec<(usize, usize)>>),
    Attention {
        q: NodeRef,
        k: NodeRef,
        v: NodeRef,
        scale: f64,
        mask: AttnMask,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Fused-op state needed by backward (the attention softmax matrix).
    aux: Option<Vec<f64>>,
}

/// Recorded computation graph. Build with the op methods, then call
/// `backward` on a scalar node; parameter gradients accumulate into an
/// internal map merged into the store via `accumulate_grads`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_grads: BTreeMap<ParamId, Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, n: NodeRef) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn scalar_value(&self, n: NodeRef) -> Result<f64, DiffError> {
        let t = self.value(n);
        if t.rows == 1 && t.cols == 1 {
            Ok(t.values[0])
        } else {
            Err(DiffError::NonScalarLoss)
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Vec<f64>>) -> NodeRef {
        self.nodes.push(Node { op, value, aux });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn input(&mut self, tensor: Tensor) -> Result<NodeRef, DiffError> {
        check_finite("input", &tensor.values)?;
        Ok(self.push(Op::Input, tensor, None))
    }

    pub fn input_from(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<NodeRef, DiffError> {
        self.input(Tensor::from_values(rows, cols, values)?)
    }

    pub fn scalar_input(&mut self, x: f64) -> Result<NodeRef, DiffError> {
        self.input(Tensor::scalar(x))
    }

    /// Brings a stored parameter onto the tape. Frozen parameters enter
    /// as plain inputs and receive no gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeRef, DiffError> {
        let t = store.tensor(id);
        check_finite("param", &t.values)?;
        let value = Tensor {
            rows: t.rows,
            cols: t.cols,
            values: t.values.clone(),
            requires_grad: false,
            grad: None,
        };
        let op = if t.requires_grad {
            Op::Param(id)
        } else {
            Op::Input
        };
        Ok(self.push(op, value, None))
    }

    fn shape(&self, n: NodeRef) -> (usize, usize) {
        let t = self.value(n);
        (t.rows, t.cols)
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        ensure(ka == kb, "matmul", "inner dimensions differ")?;
        let mut out = vec![0.0; m * n];
        matmul(&mut out, &self.value(a).values, &self.value(b).values, m, ka, n, false);
        check_finite("matmul", &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::Matmul(a, b), value, None))
    }

    /// `a * b^T`; `b` is stored row-major `n x k`.
    pub fn matmul_nt(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        ensure(ka == kb, "matmul_nt", "inner dimensions differ")?;
        let mut out = vec![0.0; m * n];
        matmul_nt(&mut out, &self.value(a).values, &self.value(b).values, m, ka, n, false);
        check_finite("matmul_nt", &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::MatmulNt(a, b), value, None))
    }

    /// `a^T * b`; `a` is stored row-major `k x m`.
    pub fn matmul_tn(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        let (ka, m) = self.shape(a);
        let (kb, n) = self.shape(b);
        ensure(ka == kb, "matmul_tn", "inner dimensions differ")?;
        let mut out = vec![0.0; m * n];
        matmul_tn(&mut out, &self.value(a).values, &self.value(b).values, m, ka, n, false);
        check_finite("matmul_tn", &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::MatmulTn(a, b), value, None))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: NodeRef,
        b: NodeRef,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeRef, NodeRef) -> Op,
    ) -> Result<NodeRef, DiffError> {
        ensure(self.shape(a) == self.shape(b), name, "shapes differ")?;
        let (rows, cols) = self.shape(a);
        let out: Vec<f64> = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &out)?;
        let value = Tensor::from_values(rows, cols, out)?;
        Ok(self.push(op(a, b), value, None))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div)
    }

    fn rowwise_combine(
        &mut self,
        name: &'static str,
        a: NodeRef,
        row: NodeRef,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeRef, NodeRef) -> Op,
    ) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        ensure(rr == 1 && rc == n, name, "row operand must be 1 x cols")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = f(self.value(a).values[i * n + j], self.value(row).values[j]);
            }
        }
        check_finite(name, &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(op(a, row), value, None))
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&mut self, a: NodeRef, row: NodeRef) -> Result<NodeRef, DiffError> {
        self.rowwise_combine("add_row", a, row, |x, y| x + y, Op::AddRow)
    }

    /// Multiplies every row elementwise by a `1 x cols` row vector.
    pub fn mul_row(&mut self, a: NodeRef, row: NodeRef) -> Result<NodeRef, DiffError> {
        self.rowwise_combine("mul_row", a, row, |x, y| x * y, Op::MulRow)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeRef,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeRef) -> Op,
    ) -> Result<NodeRef, DiffError> {
        let (rows, cols) = self.shape(a);
        let out: Vec<f64> = self.value(a).values.iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        let value = Tensor::from_values(rows, cols, out)?;
        Ok(self.push(op(a), value, None))
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, DiffError> {
        self.unary("scale", a, |x| c * x, |n| Op::Scale(n, c))
    }

    pub fn add_scalar(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, DiffError> {
        self.unary("add_scalar", a, |x| x + c, |n| Op::AddScalar(n))
    }

    pub fn abs(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        self.unary("abs", a, scalar::abs, Op::Abs)
    }

    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        self.unary("log", a, scalar::ln, Op::Log)
    }

    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        self.unary("exp", a, scalar::exp, Op::Exp)
    }

    pub fn gelu(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        self.unary("gelu", a, gelu_value, Op::Gelu)
    }

    /// Rowwise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(n > 0, "softmax", "empty rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.value(a).values[i * n..(i + 1) * n];
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            if !max.is_finite() {
                return Err(DiffError::NonFinite { op: "softmax" });
            }
            let dst = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = scalar::exp(x - max);
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::Softmax(a), value, None))
    }

    /// Rowwise layer normalization (no affine part; compose with
    /// `mul_row`/`add_row` for scale and shift).
    pub fn layer_norm(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(n > 0, "layer_norm", "empty rows")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.value(a).values[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / scalar::sqrt(var + LAYER_NORM_EPS);
            for (d, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = (x - mean) * inv;
            }
        }
        check_finite("layer_norm", &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::LayerNorm(a), value, None))
    }

    /// Rowwise L2 normalization; rows below `NORMALIZE_EPS` in norm are
    /// scaled by `1 / NORMALIZE_EPS` instead of blowing up.
    pub fn l2_normalize_rows(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.value(a).values[i * n..(i + 1) * n];
            let norm = scalar::sqrt(row.iter().map(|&x| x * x).sum::<f64>());
            let inv = 1.0 / norm.max(NORMALIZE_EPS);
            for (d, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = x * inv;
            }
        }
        check_finite("l2_normalize_rows", &out)?;
        let value = Tensor::from_values(m, n, out)?;
        Ok(self.push(Op::L2NormRows(a), value, None))
    }

    /// Rowwise log-sum-exp, `m x n -> m x 1`.
    pub fn row_log_sum_exp(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(n > 0, "row_log_sum_exp", "empty rows")?;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.value(a).values[i * n..(i + 1) * n];
            out[i] = scalar::log_sum_exp(row);
        }
        check_finite("row_log_sum_exp", &out)?;
        let value = Tensor::from_values(m, 1, out)?;
        Ok(self.push(Op::RowLogSumExp(a), value, None))
    }

    pub fn sum(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let total: f64 = self.value(a).values.iter().sum();
        check_finite("sum", &[total])?;
        Ok(self.push(Op::Sum(a), Tensor::scalar(total), None))
    }

    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        ensure(!self.value(a).is_empty(), "mean", "empty tensor")?;
        let len = self.value(a).len() as f64;
        let total: f64 = self.value(a).values.iter().sum();
        check_finite("mean", &[total / len])?;
        Ok(self.push(Op::Mean(a), Tensor::scalar(total / len), None))
    }

    pub fn transpose(&mut self, a: NodeRef) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        let src = &self.value(a).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::from_values(n, m, out)?;
        Ok(self.push(Op::Transpose(a), value, None))
    }

    pub fn slice_rows(
        &mut self,
        a: NodeRef,
        start: usize,
        len: usize,
    ) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(start + len <= m && len > 0, "slice_rows", "row range out of bounds")?;
        let out = self.value(a).values[start * n..(start + len) * n].to_vec();
        let value = Tensor::from_values(len, n, out)?;
        Ok(self.push(Op::SliceRows(a, start), value, None))
    }

    pub fn slice_cols(
        &mut self,
        a: NodeRef,
        start: usize,
        len: usize,
    ) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(start + len <= n && len > 0, "slice_cols", "column range out of bounds")?;
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&self.value(a).values[i * n + start..i * n + start + len]);
        }
        let value = Tensor::from_values(m, len, out)?;
        Ok(self.push(Op::SliceCols(a, start), value, None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeRef]) -> Result<NodeRef, DiffError> {
        ensure(!parts.is_empty(), "concat_cols", "no parts")?;
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            ensure(self.shape(p).0 == m, "concat_cols", "row counts differ")?;
            total += self.shape(p).1;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let n = self.shape(p).1;
            for i in 0..m {
                out[i * total + off..i * total + off + n]
                    .copy_from_slice(&self.value(p).values[i * n..(i + 1) * n]);
            }
            off += n;
        }
        let value = Tensor::from_values(m, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, None))
    }

    pub fn concat_rows(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, DiffError> {
        let (ma, n) = self.shape(a);
        let (mb, nb) = self.shape(b);
        ensure(n == nb, "concat_rows", "column counts differ")?;
        let mut out = Vec::with_capacity((ma + mb) * n);
        out.extend_from_slice(&self.value(a).values);
        out.extend_from_slice(&self.value(b).values);
        let value = Tensor::from_values(ma + mb, n, out)?;
        Ok(self.push(Op::ConcatRows(a, b), value, None))
    }

    /// Copies the listed rows; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: NodeRef, indices: &[usize]) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(!indices.is_empty(), "gather_rows", "no indices")?;
        ensure(indices.iter().all(|&i| i < m), "gather_rows", "row index out of bounds")?;
        let mut out = vec![0.0; indices.len() * n];
        for (r, &i) in indices.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&self.value(a).values[i * n..(i + 1) * n]);
        }
        let value = Tensor::from_values(indices.len(), n, out)?;
        Ok(self.push(Op::GatherRows(a, Rc::new(indices.to_vec())), value, None))
    }

    /// Picks individual entries into a `k x 1` column.
    pub fn gather_entries(
        &mut self,
        a: NodeRef,
        coords: &[(usize, usize)],
    ) -> Result<NodeRef, DiffError> {
        let (m, n) = self.shape(a);
        ensure(!coords.is_empty(), "gather_entries", "no coordinates")?;
        ensure(
            coords.iter().all(|&(r, c)| r < m && c < n),
            "gather_entries",
            "coordinate out of bounds",
        )?;
        let out: Vec<f64> = coords.iter().map(|&(r, c)| self.value(a).get(r, c)).collect();
        let value = Tensor::from_values(coords.len(), 1, out)?;
        Ok(self.push(Op::GatherEntries(a, Rc::new(coords.to_vec())), value, None))
    }

    /// Fused scaled-dot-product attention: `softmax(scale * q k^T) v`
    /// under the mask. Only the softmax matrix is retained for backward;
    /// scores are never materialized beyond one row.
    pub fn attention(
        &mut self,
        q: NodeRef,
        k: NodeRef,
        v: NodeRef,
        scale: f64,
        mask: AttnMask,
    ) -> Result<NodeRef, DiffError> {
        let (nq, dk) = self.shape(q);
        let (nk, dkk) = self.shape(k);
        let (nv, dv) = self.shape(v);
        ensure(dk == dkk, "attention", "query/key widths differ")?;
        ensure(nk == nv, "attention", "key/value counts differ")?;
        if let AttnMask::PrefixLm { n_vis } = mask {
            ensure(nq == nk, "attention", "prefix mask needs square attention")?;
            ensure(n_vis <= nq, "attention", "visual block out of range")?;
        }
        let qv = &self.value(q).values;
        let kv = &self.value(k).values;
        let vv = &self.value(v).values;
        let mut weights = vec![0.0; nq * nk];
        let mut out = vec![0.0; nq * dv];
        let mut srow = vec![0.0; nk];
        for i in 0..nq {
            let lim = mask.row_limit(i, nk);
            let qrow = &qv[i * dk..(i + 1) * dk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..lim {
                let krow = &kv[j * dk..(j + 1) * dk];
                let dot: f64 = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum();
                let s = scale * dot;
                srow[j] = s;
                max = max.max(s);
            }
            if !max.is_finite() {
                return Err(DiffError::NonFinite { op: "attention" });
            }
            let mut sum = 0.0;
            for j in 0..lim {
                let e = scalar::exp(srow[j] - max);
                weights[i * nk + j] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            let orow = &mut out[i * dv..(i + 1) * dv];
            for j in 0..lim {
                let a = weights[i * nk + j] * inv;
                weights[i * nk + j] = a;
                let vrow = &vv[j * dv..(j + 1) * dv];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += a * x;
                }
            }
        }
        let value = Tensor::from_values(nq, dv, out)?;
        Ok(self.push(Op::Attention { q, k, v, scale, mask }, value, Some(weights)))
    }

    /// The attention weights of a fused attention node, row-major
    /// `queries x keys`. Masked-out entries are exact zeros.
    pub fn attention_weights(&self, n: NodeRef) -> Option<&[f64]> {
        match self.nodes[n.0].op {
            Op::Attention { .. } => self.nodes[n.0].aux.as_deref(),
            _ => None,
        }
    }

    /// Reverse-mode sweep from the scalar `loss`. Parameter gradients land
    /// in an internal accumulator, fetched with `param_grad` or merged
    /// into a store with `accumulate_grads`. Calling `backward` again
    /// rebuilds the accumulator from scratch.
    pub fn backward(&mut self, loss: NodeRef) -> Result<(), DiffError> {
        {
            let t = self.value(loss);
            if t.rows != 1 || t.cols != 1 {
                return Err(DiffError::NonScalarLoss);
            }
        }
        self.param_grads.clear();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let nodes = &self.nodes;
            let node = &nodes[i];
            let get = |r: NodeRef| -> &Tensor { &nodes[r.0].value };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let acc = self
                        .param_grads
                        .entry(*id)
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (dst, &x) in acc.iter_mut().zip(&g) {
                        *dst += x;
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (get(*a).rows, get(*a).cols);
                    let n = get(*b).cols;
                    {
                        let da = grad_buf(&mut grads, *a, m * k);
                        matmul_nt(da, &g, &nodes[b.0].value.values, m, n, k, true);
                    }
                    let db = grad_buf(&mut grads, *b, k * n);
                    matmul_tn(db, &nodes[a.0].value.values, &g, k, m, n, true);
                }
                Op::MatmulNt(a, b) => {
                    let (m, k) = (get(*a).rows, get(*a).cols);
                    let n = get(*b).rows;
                    {
                        let da = grad_buf(&mut grads, *a, m * k);
                        matmul(da, &g, &nodes[b.0].value.values, m, n, k, true);
                    }
                    let db = grad_buf(&mut grads, *b, n * k);
                    matmul_tn(db, &g, &nodes[a.0].value.values, n, m, k, true);
                }
                Op::MatmulTn(a, b) => {
                    let (k, m) = (get(*a).rows, get(*a).cols);
                    let n = get(*b).cols;
                    {
                        let da = grad_buf(&mut grads, *a, k * m);
                        matmul_nt(da, &nodes[b.0].value.values, &g, k, n, m, true);
                    }
                    let db = grad_buf(&mut grads, *b, k * n);
                    matmul(db, &nodes[a.0].value.values, &g, k, m, n, true);
                }
                Op::Add(a, b) => {
                    add_assign(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_assign(grad_buf(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_assign(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_assign(grad_buf(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    {
                        let bv = &nodes[b.0].value.values;
                        let da = grad_buf(&mut grads, *a, g.len());
                        for ((dst, &gx), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *dst += gx * y;
                        }
                    }
                    let av = &nodes[a.0].value.values;
                    let db = grad_buf(&mut grads, *b, g.len());
                    for ((dst, &gx), &x) in db.iter_mut().zip(&g).zip(av) {
                        *dst += gx * x;
                    }
                }
                Op::Div(a, b) => {
                    let av = &nodes[a.0].value.values;
                    let bv = &nodes[b.0].value.values;
                    {
                        let da = grad_buf(&mut grads, *a, g.len());
                        for ((dst, &gx), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *dst += gx / y;
                        }
                    }
                    let db = grad_buf(&mut grads, *b, g.len());
                    for (i_el, dst) in db.iter_mut().enumerate() {
                        *dst -= g[i_el] * av[i_el] / (bv[i_el] * bv[i_el]);
                    }
                }
                Op::AddRow(a, row) => {
                    let n = get(*row).cols;
                    let m = g.len() / n;
                    add_assign(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    let dr = grad_buf(&mut grads, *row, n);
                    for i_r in 0..m {
                        for j in 0..n {
                            dr[j] += g[i_r * n + j];
                        }
                    }
                }
                Op::MulRow(a, row) => {
                    let n = get(*row).cols;
                    let m = g.len() / n;
                    let rv = &nodes[row.0].value.values;
                    let av = &nodes[a.0].value.values;
                    {
                        let da = grad_buf(&mut grads, *a, g.len());
                        for i_r in 0..m {
                            for j in 0..n {
                                da[i_r * n + j] += g[i_r * n + j] * rv[j];
                            }
                        }
                    }
                    let dr = grad_buf(&mut grads, *row, n);
                    for i_r in 0..m {
                        for j in 0..n {
                            dr[j] += g[i_r * n + j] * av[i_r * n + j];
                        }
                    }
                }
                Op::Scale(a, c) => add_assign(grad_buf(&mut grads, *a, g.len()), &g, *c),
                Op::AddScalar(a) => add_assign(grad_buf(&mut grads, *a, g.len()), &g, 1.0),
                Op::Abs(a) => {
                    let av = &nodes[a.0].value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((dst, &gx), &x) in da.iter_mut().zip(&g).zip(av) {
                        *dst += gx * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Op::Log(a) => {
                    let av = &nodes[a.0].value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((dst, &gx), &x) in da.iter_mut().zip(&g).zip(av) {
                        *dst += gx / x;
                    }
                }
                Op::Exp(a) => {
                    let ov = &node.value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((dst, &gx), &y) in da.iter_mut().zip(&g).zip(ov) {
                        *dst += gx * y;
                    }
                }
                Op::Gelu(a) => {
                    let av = &nodes[a.0].value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((dst, &gx), &x) in da.iter_mut().zip(&g).zip(av) {
                        *dst += gx * gelu_derivative(x);
                    }
                }
                Op::Softmax(a) => {
                    let n = node.value.cols;
                    let m = node.value.rows;
                    let yv = &node.value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for i_r in 0..m {
                        let y = &yv[i_r * n..(i_r + 1) * n];
                        let gr = &g[i_r * n..(i_r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(&a_, &b_)| a_ * b_).sum();
                        for j in 0..n {
                            da[i_r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm(a) => {
                    let n = node.value.cols;
                    let m = node.value.rows;
                    let av = &nodes[a.0].value.values;
                    let yv = &node.value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for i_r in 0..m {
                        let x = &av[i_r * n..(i_r + 1) * n];
                        let y = &yv[i_r * n..(i_r + 1) * n];
                        let gr = &g[i_r * n..(i_r + 1) * n];
                        let mean = x.iter().sum::<f64>() / n as f64;
                        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                            / n as f64;
                        let inv = 1.0 / scalar::sqrt(var + LAYER_NORM_EPS);
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gydot = gr.iter().zip(y).map(|(&a_, &b_)| a_ * b_).sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            da[i_r * n + j] += inv * (gr[j] - gmean - y[j] * gydot);
                        }
                    }
                }
                Op::L2NormRows(a) => {
                    let n = node.value.cols;
                    let m = node.value.rows;
                    let av = &nodes[a.0].value.values;
                    let yv = &node.value.values;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for i_r in 0..m {
                        let x = &av[i_r * n..(i_r + 1) * n];
                        let y = &yv[i_r * n..(i_r + 1) * n];
                        let gr = &g[i_r * n..(i_r + 1) * n];
                        let norm = scalar::sqrt(x.iter().map(|&v| v * v).sum::<f64>());
                        if norm >= NORMALIZE_EPS {
                            let dot: f64 = y.iter().zip(gr).map(|(&a_, &b_)| a_ * b_).sum();
                            for j in 0..n {
                                da[i_r * n + j] += (gr[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                da[i_r * n + j] += gr[j] / NORMALIZE_EPS;
                            }
                        }
                    }
                }
                Op::RowLogSumExp(a) => {
                    let src = &nodes[a.0].value;
                    let (m, n) = (src.rows, src.cols);
                    let lv = &node.value.values;
                    let da = grad_buf(&mut grads, *a, m * n);
                    for i_r in 0..m {
                        let x = &src.values[i_r * n..(i_r + 1) * n];
                        for j in 0..n {
                            da[i_r * n + j] += g[i_r] * scalar::exp(x[j] - lv[i_r]);
                        }
                    }
                }
                Op::Sum(a) => {
                    let len = get(*a).len();
                    let da = grad_buf(&mut grads, *a, len);
                    for dst in da.iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::Mean(a) => {
                    let len = get(*a).len();
                    let da = grad_buf(&mut grads, *a, len);
                    let c = g[0] / len as f64;
                    for dst in da.iter_mut() {
                        *dst += c;
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (get(*a).rows, get(*a).cols);
                    let da = grad_buf(&mut grads, *a, m * n);
                    for i_r in 0..m {
                        for j in 0..n {
                            da[i_r * n + j] += g[j * m + i_r];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let n = get(*a).cols;
                    let len = node.value.rows;
                    let da = grad_buf(&mut grads, *a, get(*a).len());
                    add_assign(&mut da[start * n..(start + len) * n], &g, 1.0);
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = (get(*a).rows, get(*a).cols);
                    let len = node.value.cols;
                    let da = grad_buf(&mut grads, *a, m * n);
                    for i_r in 0..m {
                        add_assign(
                            &mut da[i_r * n + start..i_r * n + start + len],
                            &g[i_r * len..(i_r + 1) * len],
                            1.0,
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols;
                    let m = node.value.rows;
                    let mut off = 0;
                    for &p in parts {
                        let n = get(p).cols;
                        let dp = grad_buf(&mut grads, p, m * n);
                        for i_r in 0..m {
                            add_assign(
                                &mut dp[i_r * n..(i_r + 1) * n],
                                &g[i_r * total + off..i_r * total + off + n],
                                1.0,
                            );
                        }
                        off += n;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let la = get(*a).len();
                    add_assign(grad_buf(&mut grads, *a, la), &g[..la], 1.0);
                    let lb = get(*b).len();
                    add_assign(grad_buf(&mut grads, *b, lb), &g[la..], 1.0);
                }
                Op::GatherRows(a, indices) => {
                    let n = get(*a).cols;
                    let da = grad_buf(&mut grads, *a, get(*a).len());
                    for (r, &src) in indices.iter().enumerate() {
                        add_assign(
                            &mut da[src * n..(src + 1) * n],
                            &g[r * n..(r + 1) * n],
                            1.0,
                        );
                    }
                }
                Op::GatherEntries(a, coords) => {
                    let n = get(*a).cols;
                    let da = grad_buf(&mut grads, *a, get(*a).len());
                    for (r, &(rr, cc)) in coords.iter().enumerate() {
                        da[rr * n + cc] += g[r];
                    }
                }
                Op::Attention { q, k, v, scale, mask } => {
                    let weights = node.aux.as_deref().expect("attention aux");
                    let (nq, dk) = (get(*q).rows, get(*q).cols);
                    let nk = get(*k).rows;
                    let dv = get(*v).cols;
                    let qv = &nodes[q.0].value.values;
                    let kvv = &nodes[k.0].value.values;
                    let vv = &nodes[v.0].value.values;
                    // All three parent grads may alias distinct slots of
                    // `grads`; fetch them one at a time via raw indices.
                    ensure_buf(&mut grads, *q, nq * dk);
                    ensure_buf(&mut grads, *k, nk * dk);
                    ensure_buf(&mut grads, *v, nk * dv);
                    let mut darow = vec![0.0; nk];
                    for i_r in 0..nq {
                        let lim = mask.row_limit(i_r, nk);
                        let grow = &g[i_r * dv..(i_r + 1) * dv];
                        let arow = &weights[i_r * nk..(i_r + 1) * nk];
                        // dV and dA from the output gradient.
                        {
                            let dvbuf = grads[v.0].as_mut().unwrap();
                            for j in 0..lim {
                                let a = arow[j];
                                let vrow = &vv[j * dv..(j + 1) * dv];
                                let dvrow = &mut dvbuf[j * dv..(j + 1) * dv];
                                let mut dot = 0.0;
                                for ((dst, &gx), &x) in
                                    dvrow.iter_mut().zip(grow).zip(vrow)
                                {
                                    *dst += a * gx;
                                    dot += gx * x;
                                }
                                darow[j] = dot;
                            }
                        }
                        // Softmax backward for this row.
                        let h: f64 =
                            (0..lim).map(|j| arow[j] * darow[j]).sum();
                        // dQ and dK from the score gradient.
                        let qrow = &qv[i_r * dk..(i_r + 1) * dk];
                        {
                            let dkbuf = grads[k.0].as_mut().unwrap();
                            for j in 0..lim {
                                let ds = scale * arow[j] * (darow[j] - h);
                                if ds == 0.0 {
                                    continue;
                                }
                                let dkrow = &mut dkbuf[j * dk..(j + 1) * dk];
                                for (dst, &x) in dkrow.iter_mut().zip(qrow) {
                                    *dst += ds * x;
                                }
                            }
                        }
                        let dqbuf = grads[q.0].as_mut().unwrap();
                        let dqrow = &mut dqbuf[i_r * dk..(i_r + 1) * dk];
                        for j in 0..lim {
                            let ds = scale * arow[j] * (darow[j] - h);
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kvv[j * dk..(j + 1) * dk];
                            for (dst, &x) in dqrow.iter_mut().zip(krow) {
                                *dst += ds * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated for a parameter by the last `backward`.
    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.param_grads.get(&id).map(|v| v.as_slice())
    }

    /// Adds `scale` times each accumulated parameter gradient into the
    /// store's gradient buffers.
    pub fn accumulate_grads(&self, store: &mut ParamStore, scale: f64) {
        for (&id, g) in &self.param_grads {
            store.tensor_mut(id).accumulate_grad(g, scale);
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], r: NodeRef, len: usize) -> &mut Vec<f64> {
    let slot = &mut grads[r.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

fn ensure_buf(grads: &mut [Option<Vec<f64>>], r: NodeRef, len: usize) {
    if grads[r.0].is_none() {
        grads[r.0] = Some(vec![0.0; len]);
    }
}

fn add_assign(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

const SQRT_HALF: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7; // 1 / sqrt(2 pi)

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + scalar::erf(x * SQRT_HALF))
}

fn gelu_derivative(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + scalar::erf(x * SQRT_HALF));
    let phi_pdf = INV_SQRT_TAU * scalar::exp(-0.5 * x * x);
    phi_cdf + x * phi_pdf
}

/// Per-parameter result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// Compares the analytic gradients already stored on the named parameters
/// against central finite differences of `f`.
///
/// For each parameter up to `samples_per_tensor` coordinates are probed
/// (all of them when the tensor is small enough, otherwise a seeded
/// without-replacement sample). The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    names: &[&str],
    h: f64,
    samples_per_tensor: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore) -> Result<f64, DiffError>,
{
    debug_assert!(h > 0.0);
    let mut rng = rng_from_seed(seed);
    let mut params = Vec::new();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut count = 0usize;

    for &name in names {
        let id = store
            .id(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let analytic = store
            .tensor(id)
            .grad
            .clone()
            .ok_or_else(|| DiffError::MissingGrad(name.to_string()))?;
        let len = analytic.len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            // Partial Fisher-Yates draw without replacement.
            let mut pool: Vec<usize> = (0..len).collect();
            let mut picked = Vec::with_capacity(samples_per_tensor);
            for i in 0..samples_per_tensor {
                let j = rng.gen_range(i..len);
                pool.swap(i, j);
                picked.push(pool[i]);
            }
            picked
        };

        let mut p_max = 0.0f64;
        let mut p_sum = 0.0f64;
        for &c in &coords {
            let old = store.tensor(id).values[c];
            store.tensor_mut(id).values[c] = old + h;
            let up = f(store)?;
            store.tensor_mut(id).values[c] = old - h;
            let down = f(store)?;
            store.tensor_mut(id).values[c] = old;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[c];
            let denom = scalar::abs(a).max(scalar::abs(numeric)).max(1e-8);
            let rel = scalar::abs(a - numeric) / denom;
            p_max = p_max.max(rel);
            p_sum += rel;
        }
        max_rel = max_rel.max(p_max);
        sum_rel += p_sum;
        count += coords.len();
        params.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: p_max,
            mean_rel_err: p_sum / coords.len().max(1) as f64,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        params,
        max_rel_err: max_rel,
        mean_rel_err: sum_rel / count.max(1) as f64,
    })
}

/// Closed-form gradient of the contrastive loss `-ln p_positive` with
/// respect to the raw (unnormalized) anchor embedding, where similarities
/// are cosines of normalized vectors and `p` is the softmax of
/// similarity / tau over the candidates.
///
/// Serves as an independent oracle against the tape: the cosine gradient
/// lives in the tangent space of the anchor direction, so the result is
/// orthogonal to the anchor.
pub fn closed_form_infonce_grad(
    anchor: &[f64],
    candidates: &[Vec<f64>],
    positive: usize,
    tau: f64,
) -> Result<Vec<f64>, DiffError> {
    if tau <= 0.0 {
        return Err(DiffError::InvalidTemperature);
    }
    ensure(candidates.len() >= 2, "closed_form_infonce_grad", "need at least two candidates")?;
    ensure(positive < candidates.len(), "closed_form_infonce_grad", "positive out of range")?;
    let dim = anchor.len();
    ensure(
        candidates.iter().all(|c| c.len() == dim),
        "closed_form_infonce_grad",
        "candidate width differs from anchor",
    )?;

    let norm = scalar::sqrt(anchor.iter().map(|&x| x * x).sum::<f64>()).max(NORMALIZE_EPS);
    let ahat: Vec<f64> = anchor.iter().map(|&x| x / norm).collect();
    let mut chats = Vec::with_capacity(candidates.len());
    let mut sims = Vec::with_capacity(candidates.len());
    for c in candidates {
        let cn = scalar::sqrt(c.iter().map(|&x| x * x).sum::<f64>()).max(NORMALIZE_EPS);
        let chat: Vec<f64> = c.iter().map(|&x| x / cn).collect();
        let sim: f64 = ahat.iter().zip(&chat).map(|(&a, &b)| a * b).sum();
        sims.push(sim);
        chats.push(chat);
    }
    let scaled: Vec<f64> = sims.iter().map(|&s| s / tau).collect();
    let lse = scalar::log_sum_exp(&scaled);
    let probs: Vec<f64> = scaled.iter().map(|&s| scalar::exp(s - lse)).collect();

    // d sim_k / d anchor = (c_hat_k - sim_k * a_hat) / |anchor|
    let mut grad = vec![0.0; dim];
    for (k, chat) in chats.iter().enumerate() {
        let w = (probs[k] - if k == positive { 1.0 } else { 0.0 }) / tau;
        if w == 0.0 {
            continue;
        }
        for j in 0..dim {
            grad[j] += w * (chat[j] - sims[k] * ahat[j]) / norm;
        }
    }
    Ok(grad)
}
