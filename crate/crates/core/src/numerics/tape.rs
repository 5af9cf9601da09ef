//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value and whatever
//! it needs for the backward rule. Nodes are only ever appended, so inputs
//! always precede their consumers and [`Tape::backward`] is a single sweep
//! in reverse insertion order.
//!
//! A tape is meant to be built for one forward pass and thrown away.

use super::{Matrix, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scales the backward contribution of one op kind.
///
/// Only useful to prove that a gradient checker notices a broken rule.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows { input: Var, norms: Vec<f64> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize },
    GatherRows { input: Var, indices: Vec<usize> },
    Reshape(Var),
    GroupCosine {
        query: Var,
        protos: Var,
        groups: usize,
        query_norms: Vec<f64>,
        proto_norms: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Transpose(..) => "transpose",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::GroupCosine { .. } => "group_cosine",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Per-column batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the value folded into running statistics.
    pub var: Vec<f64>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros if the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> NumericsError {
    NumericsError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn checked(op: &'static str, m: Matrix) -> Result<Matrix, NumericsError> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    #[doc(hidden)]
    pub fn with_fault(fault: Option<GradFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::NormalizeRows { input, .. }
            | Op::SliceCols { input, .. }
            | Op::GatherRows { input, .. } => vec![*input],
            Op::ConcatCols(parts) => parts.clone(),
            Op::GroupCosine { query, protos, .. } => vec![*query, *protos],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input; backward never propagates into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(checked("matmul", out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(checked("add", out)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(checked("sub", out)?, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(checked("mul", out)?, Op::Mul(a, b)))
    }

    fn broadcast_row(
        &mut self,
        op: &'static str,
        m: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix, NumericsError> {
        let (x, r) = (self.value(m), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err(op, x, r));
        }
        let cols = x.cols();
        let data = x
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.as_slice()[i % cols]))
            .collect();
        checked(op, Matrix::raw(x.rows(), cols, data))
    }

    /// `m + row`, broadcasting a 1xC row over every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, NumericsError> {
        let out = self.broadcast_row("add_row", m, row, |x, r| x + r)?;
        Ok(self.push(out, Op::AddRow(m, row)))
    }

    /// `m * row` elementwise, broadcasting a 1xC row over every row of `m`.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var, NumericsError> {
        let out = self.broadcast_row("mul_row", m, row, |x, r| x * r)?;
        Ok(self.push(out, Op::MulRow(m, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * s);
        Ok(self.push(checked("scale", out)?, Op::Scale(a, s)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x + s);
        Ok(self.push(checked("add_scalar", out)?, Op::AddScalar(a)))
    }

    /// Multiplies `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(shape_err("scale_by", self.value(a), sv));
        }
        let k = sv.get(0, 0);
        let out = self.value(a).map(|x| x * k);
        Ok(self.push(checked("scale_by", out)?, Op::ScaleBy(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::exp);
        Ok(self.push(checked("exp", out)?, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(f64::ln);
        Ok(self.push(checked("log", out)?, Op::Log(a)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(softplus);
        Ok(self.push(checked("softplus", out)?, Op::Softplus(a)))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The derivative at exactly 0
    /// is taken as `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NumericsError> {
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(NumericsError::Precondition(format!(
                "leaky_relu slope must lie in (0, 1], got {slope}"
            )));
        }
        let out = self
            .value(a)
            .map(|x| if x >= 0.0 { x } else { slope * x });
        Ok(self.push(out, Op::LeakyRelu(a, slope)))
    }

    /// Softmax of each row, max-subtracted.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let cols = x.cols();
        for (r, dst) in out.as_mut_slice().chunks_mut(cols).enumerate() {
            softmax_row(x.row(r), dst);
        }
        Ok(self.push(checked("row_softmax", out)?, Op::RowSoftmax(a)))
    }

    /// Log-softmax of each row via log-sum-exp.
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Matrix::zeros(x.rows(), cols);
        for (r, dst) in out.as_mut_slice().chunks_mut(cols).enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(checked("row_log_softmax", out)?, Op::RowLogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        Ok(self.push(checked("sum", Matrix::scalar(s))?, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let s = x.sum() / x.len() as f64;
        Ok(self.push(checked("mean", Matrix::scalar(s))?, Op::Mean(a)))
    }

    /// Scales every row to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let cols = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = x.clone();
        for (r, row) in out.as_mut_slice().chunks_mut(cols).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::ZeroNorm { row: r, group: None });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows { input: a, norms }))
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Precondition("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), m));
            }
            cols += m.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Matrix::raw(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(NumericsError::Precondition(format!(
                "slice_cols {start}..{end} out of range for {} columns",
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Matrix::raw(x.rows(), end - start, data);
        Ok(self.push(out, Op::SliceCols { input: a, start }))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if indices.is_empty() {
            return Err(NumericsError::Precondition("gather_rows of nothing".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * x.cols());
        for &i in indices {
            if i >= x.rows() {
                return Err(NumericsError::Precondition(format!(
                    "gather_rows index {i} out of range for {} rows",
                    x.rows()
                )));
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Matrix::raw(indices.len(), x.cols(), data);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(NumericsError::Shape {
                op: "reshape",
                left: x.shape(),
                right: (rows, cols),
            });
        }
        let out = Matrix::raw(rows, cols, x.as_slice().to_vec());
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Group-wise cosine relations between a 1xD `query` and each row of the
    /// NxD `protos`: entry `(j, l)` is the cosine of the `l`-th contiguous
    /// channel group of the query against the same group of row `j`.
    pub fn group_cosine(
        &mut self,
        query: Var,
        protos: Var,
        groups: usize,
    ) -> Result<Var, NumericsError> {
        let (q, c) = (self.value(query), self.value(protos));
        if q.rows() != 1 || q.cols() != c.cols() {
            return Err(shape_err("group_cosine", q, c));
        }
        let dim = q.cols();
        if groups == 0 || dim % groups != 0 {
            return Err(NumericsError::Precondition(format!(
                "group count {groups} must divide dimension {dim}"
            )));
        }
        let width = dim / groups;
        let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let qrow = q.row(0);
        let query_norms: Vec<f64> = qrow.chunks(width).map(norm).collect();
        let n = c.rows();
        let mut proto_norms = Vec::with_capacity(n * groups);
        let mut out = vec![0.0; n * groups];
        for j in 0..n {
            let crow = c.row(j);
            for l in 0..groups {
                let cs = &crow[l * width..(l + 1) * width];
                let qs = &qrow[l * width..(l + 1) * width];
                let cn = norm(cs);
                if cn == 0.0 || query_norms[l] == 0.0 {
                    return Err(NumericsError::ZeroNorm {
                        row: j,
                        group: Some(l),
                    });
                }
                let dot: f64 = qs.iter().zip(cs).map(|(a, b)| a * b).sum();
                out[j * groups + l] = dot / (query_norms[l] * cn);
                proto_norms.push(cn);
            }
        }
        Ok(self.push(
            Matrix::raw(n, groups, out),
            Op::GroupCosine {
                query,
                protos,
                groups,
                query_norms,
                proto_norms,
            },
        ))
    }

    /// Train-mode batch normalization: each column is normalized over the
    /// rows with biased variance plus `eps`, then scaled by `gamma` and
    /// shifted by `beta` (both 1xC).
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), NumericsError> {
        let x = self.value(input);
        let (n, cols) = x.shape();
        if n < 2 {
            return Err(NumericsError::Precondition(format!(
                "train-mode batch norm needs at least 2 rows, got {n}"
            )));
        }
        for p in [gamma, beta] {
            let m = self.value(p);
            if m.shape() != (1, cols) {
                return Err(shape_err("batch_norm", x, m));
            }
        }
        let mut mean = vec![0.0; cols];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; cols];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; n * cols];
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let mut out = vec![0.0; n * cols];
        for r in 0..n {
            for c in 0..cols {
                let h = (x.get(r, c) - mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|s| s / (n - 1) as f64).collect(),
        };
        let out = checked("batch_norm", Matrix::raw(n, cols, out))?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: Matrix::raw(n, cols, xhat),
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Reverse sweep from a 1x1 `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericsError> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| NumericsError::Precondition("root is not on this tape".into()))?;
        if root_node.value.shape() != (1, 1) {
            let (rows, cols) = root_node.value.shape();
            return Err(NumericsError::NonScalarRoot { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                let factor = match self.fault {
                    Some(f) if f.op == node.op.name() => f.factor,
                    _ => 1.0,
                };
                self.propagate(node, &g, factor, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, factor: f64, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let m = if factor == 1.0 { m } else { m.map(|x| x * factor) };
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose()).expect("matmul grad"));
                acc(*b, val(*a).transpose().matmul(g).expect("matmul grad"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(m, r) => {
                acc(*m, g.clone());
                acc(*r, column_sums(g));
            }
            Op::MulRow(m, r) => {
                let row = val(*r).as_slice();
                let cols = g.cols();
                let dm = g
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * row[i % cols])
                    .collect();
                acc(*m, Matrix::raw(g.rows(), cols, dm));
                acc(*r, column_sums(&g.zip_map(val(*m), |x, y| x * y)));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = val(*s).get(0, 0);
                acc(*a, g.map(|x| x * k));
                let ds: f64 = g
                    .as_slice()
                    .iter()
                    .zip(val(*a).as_slice())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(*s, Matrix::scalar(ds));
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, v| x / v)),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, v| x * sigmoid(v))),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { x * slope }),
            ),
            Op::RowSoftmax(a) => {
                let cols = g.cols();
                let mut d = Matrix::zeros(g.rows(), cols);
                for (r, dst) in d.as_mut_slice().chunks_mut(cols).enumerate() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, d);
            }
            Op::RowLogSoftmax(a) => {
                let cols = g.cols();
                let mut d = Matrix::zeros(g.rows(), cols);
                for (r, dst) in d.as_mut_slice().chunks_mut(cols).enumerate() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::NormalizeRows { input, norms } => {
                let cols = g.cols();
                let mut d = Matrix::zeros(g.rows(), cols);
                for (r, dst) in d.as_mut_slice().chunks_mut(cols).enumerate() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                acc(*input, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    acc(p, Matrix::raw(g.rows(), w, data));
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let x = val(*input);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*input, d);
            }
            Op::GatherRows { input, indices } => {
                let x = val(*input);
                let mut d = Matrix::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut d.as_mut_slice()[i * cols..(i + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*input, d);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::raw(r, c, g.as_slice().to_vec()));
            }
            Op::GroupCosine {
                query,
                protos,
                groups,
                query_norms,
                proto_norms,
            } => {
                let (q, c) = (val(*query), val(*protos));
                let dim = q.cols();
                let width = dim / groups;
                let mut dq = vec![0.0; dim];
                let mut dc = vec![0.0; c.len()];
                let qrow = q.row(0);
                for j in 0..c.rows() {
                    let crow = c.row(j);
                    for l in 0..*groups {
                        let gv = g.get(j, l);
                        if gv == 0.0 {
                            continue;
                        }
                        let cos = y.get(j, l);
                        let (qn, cn) = (query_norms[l], proto_norms[j * groups + l]);
                        for k in l * width..(l + 1) * width {
                            dq[k] += gv * (crow[k] / (qn * cn) - cos * qrow[k] / (qn * qn));
                            dc[j * dim + k] +=
                                gv * (qrow[k] / (qn * cn) - cos * crow[k] / (cn * cn));
                        }
                    }
                }
                acc(*query, Matrix::raw(1, dim, dq));
                acc(*protos, Matrix::raw(c.rows(), dim, dc));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, cols) = g.shape();
                let gam = val(*gamma).as_slice();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut sum_dxhat = vec![0.0; cols];
                let mut sum_dxhat_xhat = vec![0.0; cols];
                for r in 0..n {
                    for c in 0..cols {
                        let gv = g.get(r, c);
                        let h = xhat.get(r, c);
                        dgamma[c] += gv * h;
                        dbeta[c] += gv;
                        let dh = gv * gam[c];
                        sum_dxhat[c] += dh;
                        sum_dxhat_xhat[c] += dh * h;
                    }
                }
                let nf = n as f64;
                let mut dx = vec![0.0; n * cols];
                for r in 0..n {
                    for c in 0..cols {
                        let dh = g.get(r, c) * gam[c];
                        dx[r * cols + c] = inv_std[c] / nf
                            * (nf * dh - sum_dxhat[c] - xhat.get(r, c) * sum_dxhat_xhat[c]);
                    }
                }
                acc(*input, Matrix::raw(n, cols, dx));
                acc(*gamma, Matrix::raw(1, cols, dgamma));
                acc(*beta, Matrix::raw(1, cols, dbeta));
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let cols = g.cols();
    let mut out = vec![0.0; cols];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::raw(1, cols, out)
}
