//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse and accumulates exact
//! gradients into every leaf that requires them.
//!
//! Operations with branch points (`max`, `relu`, `sqrt` at zero) append the
//! branch they took to a decision log. Two evaluations that produced the same
//! log took the same differentiable piece of the function, which is what the
//! finite-difference checker uses to skip non-differentiable coordinates.

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Max {
        x: Var,
        index: usize,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Max { .. } => "max",
            Op::MaskMul { .. } => "mask_mul",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    decisions: Vec<u32>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape_or_scalar(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.is_scalar() || b.is_scalar()
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Vec<usize> {
    if a.is_scalar() {
        b.shape().to_vec()
    } else {
        a.shape().to_vec()
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.is_scalar() && !b.is_scalar(), b.is_scalar() && !a.is_scalar()) {
        (true, _) => {
            let s = a.data()[0];
            b.data().iter().map(|&y| f(s, y)).collect()
        }
        (_, true) => {
            let s = b.data()[0];
            a.data().iter().map(|&x| f(x, s)).collect()
        }
        _ => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Branch decisions taken so far by `max`, `relu` and `sqrt`.
    pub fn decisions(&self) -> &[u32] {
        &self.decisions
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// A constant; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite input at leaf node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {} (node {idx})",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    fn dim_err(&self, op: &str, detail: String) -> Error {
        Error::Dimension(format!("{op} (node {}): {detail}", self.nodes.len()))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !same_shape_or_scalar(ta, tb) {
            return Err(self.dim_err(
                op.name(),
                format!("shapes {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let value = Tensor::new(broadcast_shape(ta, tb), zip_broadcast(ta, tb, f))?;
        self.push(op, value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        self.push(Op::AddScalar(a), value, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push(Op::Scale(a, c), value, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return Err(self.dim_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[1] {
            return Err(self.dim_err(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMulNt(a, b), Tensor::new(vec![m, n], out)?, &[a, b])
    }

    /// Adds the vector `bias` to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !is_matrix(tx) || tb.shape() != [tx.shape()[1]] {
            return Err(self.dim_err(
                "add_row_bias",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let cols = tx.shape()[1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(Op::AddRowBias(x, bias), value, &[x, bias])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(op, value, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    /// `max(x, 0)`; records which entries were active.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let active: Vec<u32> = self.value(a).data().iter().map(|&v| u32::from(v > 0.0)).collect();
        self.decisions.extend(active);
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(v) = t.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Numeric(format!(
                "sqrt of negative value {v} (node {})",
                self.nodes.len()
            )));
        }
        let positive: Vec<u32> = t.data().iter().map(|&v| u32::from(v > 0.0)).collect();
        self.decisions.extend(positive);
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Row-wise softmax. Columns flagged in `masked` receive probability 0.
    pub fn softmax_rows(&mut self, x: Var, masked: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) {
            return Err(self.dim_err("softmax", format!("shape {:?}", t.shape())));
        }
        let cols = t.shape()[1];
        if let Some(mask) = masked {
            if mask.len() != cols || mask.iter().all(|m| *m) {
                return Err(self.dim_err(
                    "softmax",
                    format!("mask of length {} for {cols} columns", mask.len()),
                ));
            }
        }
        let keep = |j: usize| masked.is_none_or(|m| !m[j]);
        let mut out = vec![0.0; t.len()];
        for (row_in, row_out) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row_in[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (row_in[j] - max).exp();
                    row_out[j] = e;
                    total += e;
                }
            }
            for v in row_out.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Op::Softmax(x), value, &[x])
    }

    /// Row-wise layer normalisation with learned `scale` and `offset`.
    pub fn layer_norm_rows(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (tx, ts, to) = (self.value(x), self.value(scale), self.value(offset));
        if !is_matrix(tx) || ts.shape() != [tx.shape()[1]] || to.shape() != ts.shape() {
            return Err(self.dim_err(
                "layer_norm",
                format!("x {:?}, scale {:?}, offset {:?}", tx.shape(), ts.shape(), to.shape()),
            ));
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        let mut normed = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..cols {
                let n = (row[c] - mean) * inv;
                normed[r * cols + c] = n;
                out[r * cols + c] = n * ts.data()[c] + to.data()[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(
            Op::LayerNorm {
                x,
                scale,
                offset,
                normed,
                rstd,
            },
            value,
            &[x, scale, offset],
        )
    }

    /// Rows `ids` of a `[vocab, d]` table, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !is_matrix(t) {
            return Err(self.dim_err("gather", format!("table shape {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(self.dim_err("gather", format!("id {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) {
            return Err(self.dim_err("select_rows", format!("shape {:?}", t.shape())));
        }
        let n = t.shape()[0];
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(self.dim_err("select_rows", format!("row {bad} out of range for {n} rows")));
        }
        let cols = t.shape()[1];
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], out)?;
        self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            value,
            &[x],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || start + len > t.shape()[1] {
            return Err(self.dim_err(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let rows = t.shape()[0];
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        self.push(Op::SliceCols { x, start }, value, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|v| self.value(*v))
            .ok_or_else(|| self.dim_err("concat_cols", "no inputs".into()))?;
        let rows = first.rows();
        if parts
            .iter()
            .any(|v| !is_matrix(self.value(*v)) || self.value(*v).shape()[0] != rows)
        {
            return Err(self.dim_err("concat_cols", "inputs must be matrices with equal rows".into()));
        }
        let total: usize = parts.iter().map(|v| self.value(*v).shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in parts {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Maximum over all entries. Ties resolve to the first index.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(self.dim_err("max", "empty tensor".into()));
        }
        let mut index = 0;
        for (i, v) in t.data().iter().enumerate() {
            if *v > t.data()[index] {
                index = i;
            }
        }
        let m = t.data()[index];
        self.decisions.push(index as u32);
        self.push(Op::Max { x, index }, Tensor::scalar(m), &[x])
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(self.dim_err(
                "mask_mul",
                format!("mask of {} for {} values", mask.len(), t.len()),
            ));
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(Op::MaskMul { x, mask }, value, &[x])
    }

    /// Reverse-mode sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar node {} of shape {:?}",
                output.0,
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Accumulate `g` into `v`, reducing to a scalar when `v` was broadcast.
    fn accumulate_broadcast(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>, shape: &[usize]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let target = &self.nodes[v.0].value;
        let t = if target.is_scalar() && !shape.is_empty() {
            Tensor::scalar(g.iter().sum())
        } else {
            Tensor::new(shape.to_vec(), g).expect("gradient shape")
        };
        self.accumulate(grads, v, t);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, gd.to_vec(), shape);
                self.accumulate_broadcast(grads, *b, gd.to_vec(), shape);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, gd.to_vec(), shape);
                self.accumulate_broadcast(grads, *b, gd.iter().map(|v| -v).collect(), shape);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = zip_broadcast_grad(gd, tb);
                    self.accumulate_broadcast(grads, *a, ga, shape);
                }
                if self.needs(*b) {
                    let gb = zip_broadcast_grad(gd, ta);
                    self.accumulate_broadcast(grads, *b, gb, shape);
                }
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Scale(a, c) => {
                let data = gd.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(gd, tb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(ta.data(), gd, &mut gb, m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_acc(gd, tb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_acc(gd, ta.data(), &mut gb, m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], gb).expect("shape"));
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    let cols = shape[1];
                    let mut gb = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::vector(gb));
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let data = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let data = gd.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let data = gd
                    .iter()
                    .zip(y)
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = shape[1];
                let mut data = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(data.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                normed,
                rstd,
            } => {
                let (rows, cols) = (shape[0], shape[1]);
                let gamma = self.value(*scale).data();
                if self.needs(*scale) || self.needs(*offset) {
                    let mut gs = vec![0.0; cols];
                    let mut go = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = gd[r * cols + c];
                            gs[c] += gv * normed[r * cols + c];
                            go[c] += gv;
                        }
                    }
                    self.accumulate(grads, *scale, Tensor::vector(gs));
                    self.accumulate(grads, *offset, Tensor::vector(go));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for c in 0..cols {
                            let d = gd[base + c] * gamma[c];
                            mean_d += d;
                            mean_dn += d * normed[base + c];
                        }
                        mean_d /= n;
                        mean_dn /= n;
                        for c in 0..cols {
                            let d = gd[base + c] * gamma[c];
                            gx[base + c] = rstd[r] * (d - mean_d - normed[base + c] * mean_dn);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx).expect("shape"));
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let cols = t.shape()[1];
                let mut gt = vec![0.0; t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape().to_vec(), gt).expect("shape"));
            }
            Op::SelectRows { x, rows } => {
                let t = self.value(*x);
                let cols = t.shape()[1];
                let mut gx = vec![0.0; t.len()];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..cols {
                        gx[src * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), gx).expect("shape"));
            }
            Op::SliceCols { x, start } => {
                let t = self.value(*x);
                let (rows, cols) = (t.shape()[0], t.shape()[1]);
                let len = shape[1];
                let mut gx = vec![0.0; t.len()];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], gx).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let rows = shape[0];
                let total = shape[1];
                let mut offset = 0;
                for v in parts {
                    let w = self.value(*v).shape()[1];
                    if self.needs(*v) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *v, Tensor::new(vec![rows, w], gp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(t.shape(), gd[0]));
            }
            Op::Max { x, index } => {
                let t = self.value(*x);
                let mut gx = Tensor::zeros(t.shape());
                gx.data_mut()[*index] = gd[0];
                self.accumulate(grads, *x, gx);
            }
            Op::MaskMul { x, mask } => {
                let data = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), data).expect("shape"));
            }
        }
    }
}

/// Gradient of `a ⊙ other` w.r.t. `a`, given upstream `g` over the broadcast shape.
fn zip_broadcast_grad(g: &[f64], other: &Tensor) -> Vec<f64> {
    if other.is_scalar() {
        let s = other.data()[0];
        g.iter().map(|v| v * s).collect()
    } else {
        g.iter().zip(other.data()).map(|(a, b)| a * b).collect()
    }
}
