//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every builder method
//! evaluates its forward value immediately and records how to push an
//! adjoint back to its parents, so node order is a topological order by
//! construction. The graph is rebuilt for every training step.

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written adjoint.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; anything the adjoint needs beyond the input and output
/// values (sort orders, index tables) lives in `self`.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one optional adjoint per input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    MulCol,
    Scale(f64),
    Offset,
    MatMul,
    Transpose,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Square,
    Sqrt,
    Clamp(f64, f64),
    SoftmaxRows,
    NormalizeRows(f64),
    LayerNormRows(f64),
    Sum,
    Mean,
    ConcatCols(Vec<usize>),
    SliceCols(usize),
    GatherRows(Vec<usize>),
    BroadcastRows,
    GroupMax(Vec<usize>),
    BatchedMatVec3,
    Reshape,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::MulCol => "mul_col",
            Op::Scale(_) => "scale",
            Op::Offset => "offset",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows => "softmax_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::LayerNormRows(_) => "layer_norm_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(_) => "slice_cols",
            Op::GatherRows(_) => "gather_rows",
            Op::BroadcastRows => "broadcast_rows",
            Op::GroupMax(_) => "group_max",
            Op::BatchedMatVec3 => "batched_matvec3",
            Op::Reshape => "reshape",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(root)/d(var); a zero array when `var` does not influence the root.
    pub fn get(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Moves the adjoint out, leaving a zero-gradient slot.
    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads.get_mut(var.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn same_len(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(
        a.len(),
        b.len(),
        "{what}: shapes {:?} and {:?} differ",
        a.shape(),
        b.shape()
    );
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    out
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op) -> Var {
        let needs_grad = match op {
            Op::Input => true,
            Op::Constant => false,
            _ => parents.iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Input)
    }

    /// A leaf excluded from differentiation; its adjoint is never formed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_len(va, vb, "add");
        let out = va.zip_map(vb, |x, y| x + y);
        self.push(out, vec![a.0, b.0], Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_len(va, vb, "sub");
        let out = va.zip_map(vb, |x, y| x - y);
        self.push(out, vec![a.0, b.0], Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_len(va, vb, "mul");
        let out = va.zip_map(vb, |x, y| x * y);
        self.push(out, vec![a.0, b.0], Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_len(va, vb, "div");
        let out = va.zip_map(vb, |x, y| x / y);
        self.push(out, vec![a.0, b.0], Op::Div)
    }

    /// `a[n, c] + row[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        assert_eq!(vr.len(), c, "add_row: row has {} values for {c} columns", vr.len());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, vec![a.0, row.0], Op::AddRow)
    }

    /// `a[n, c] * row[c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        assert_eq!(vr.len(), c, "mul_row: row has {} values for {c} columns", vr.len());
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        self.push(out, vec![a.0, row.0], Op::MulRow)
    }

    /// `a[n, c] * col[n]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.len(), va.rows(), "mul_col: column length mismatch");
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.data()[r];
            for o in out.row_slice_mut(r) {
                *o *= s;
            }
        }
        self.push(out, vec![a.0, col.0], Op::MulCol)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, vec![a.0], Op::Scale(k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, vec![a.0], Op::Offset)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(out, vec![a.0, b.0], Op::MatMul)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        self.push(out, vec![a.0], Op::Transpose)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, vec![a.0], op)
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    /// Adjoint passes through where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(out, vec![a.0], Op::SoftmaxRows)
    }

    /// `x / sqrt(|x|^2 + eps^2)` per row; unit length away from the origin,
    /// exactly zero at it.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.push(out, vec![a.0], Op::NormalizeRows(eps))
    }

    /// Zero-mean unit-variance per row, without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let sd = (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) / sd;
            }
        }
        self.push(out, vec![a.0], Op::LayerNormRows(eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), vec![a.0], Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), vec![a.0], Op::Mean)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(v.row_slice(r));
            }
            off += w;
        }
        let parents = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::matrix(rows, total, out), parents, Op::ConcatCols(widths))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        self.push(Tensor::matrix(rows, len, out), vec![a.0], Op::SliceCols(start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(v.row_slice(i));
        }
        self.push(Tensor::matrix(idx.len(), c, out), vec![a.0], Op::GatherRows(idx.to_vec()))
    }

    /// Repeats a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        let c = v.len();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        self.push(Tensor::matrix(n, c, out), vec![a.0], Op::BroadcastRows)
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    ///
    /// Ties go to the earliest row, so the result is a deterministic function
    /// of the multiset of rows in each block.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let v = self.value(a);
        let (rows, c) = (v.rows(), v.cols());
        assert!(group > 0 && rows % group == 0, "group_max: {rows} rows not divisible by {group}");
        let ng = rows / group;
        let mut out = vec![f64::NEG_INFINITY; ng * c];
        let mut arg = vec![0usize; ng * c];
        for gi in 0..ng {
            for r in gi * group..(gi + 1) * group {
                for (j, &x) in v.row_slice(r).iter().enumerate() {
                    if x > out[gi * c + j] {
                        out[gi * c + j] = x;
                        arg[gi * c + j] = r;
                    }
                }
            }
        }
        self.push(Tensor::matrix(ng, c, out), vec![a.0], Op::GroupMax(arg))
    }

    /// Row-wise `y_i = A_i x_i` with `A_i` stored as 9 row-major columns.
    pub fn batched_matvec3(&mut self, mats: Var, vecs: Var) -> Var {
        let (m, x) = (self.value(mats), self.value(vecs));
        assert_eq!(m.cols(), 9);
        assert_eq!(x.cols(), 3);
        assert_eq!(m.rows(), x.rows());
        let n = x.rows();
        let mut out = vec![0.0; n * 3];
        for r in 0..n {
            let a = m.row_slice(r);
            let v = x.row_slice(r);
            for i in 0..3 {
                out[r * 3 + i] = a[i * 3] * v[0] + a[i * 3 + 1] * v[1] + a[i * 3 + 2] * v[2];
            }
        }
        self.push(Tensor::matrix(n, 3, out), vec![mats.0, vecs.0], Op::BatchedMatVec3)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, vec![a.0], Op::Reshape)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(output, parents, Op::Custom(op))
    }

    /// First node whose forward value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Adjoints of a scalar `root` with respect to every earlier node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[root.0] = Some(Tensor::new(rv.shape(), vec![1.0]));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.all_finite() {
                return Err(Error::NumericNode {
                    node: i,
                    op: node.op.name(),
                    detail: "non-finite forward value".into(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NumericNode {
                    node: i,
                    op: node.op.name(),
                    detail: "non-finite adjoint".into(),
                });
            }
            if !node.parents.is_empty() {
                let contribs = self.local_adjoints(node, &g);
                for (&p, c) in node.parents.iter().zip(contribs) {
                    let Some(c) = c else { continue };
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn parent_value(&self, node: &Node, k: usize) -> &Tensor {
        &self.nodes[node.parents[k]].value
    }

    fn wants(&self, node: &Node, k: usize) -> bool {
        self.nodes[node.parents[k]].needs_grad
    }

    fn local_adjoints(&self, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let y = &node.value;
        let pv = |k: usize| self.parent_value(node, k);
        let reshape_like = |t: Tensor, like: &Tensor| t.reshape(like.shape());
        match &node.op {
            Op::Input | Op::Constant => vec![],
            Op::Add => vec![
                Some(reshape_like(g.clone(), pv(0))),
                Some(reshape_like(g.clone(), pv(1))),
            ],
            Op::Sub => vec![
                Some(reshape_like(g.clone(), pv(0))),
                Some(reshape_like(g.map(|x| -x), pv(1))),
            ],
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                vec![
                    self.wants(node, 0).then(|| reshape_like(g.zip_map(b, |g, b| g * b), a)),
                    self.wants(node, 1).then(|| reshape_like(g.zip_map(a, |g, a| g * a), b)),
                ]
            }
            Op::Div => {
                let (a, b) = (pv(0), pv(1));
                let ga = g.zip_map(b, |g, b| g / b);
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect();
                vec![
                    Some(reshape_like(ga, a)),
                    Some(Tensor::new(b.shape(), gb)),
                ]
            }
            Op::AddRow => {
                let b = pv(1);
                vec![
                    Some(g.clone()),
                    self.wants(node, 1).then(|| Tensor::new(b.shape(), col_sums(g))),
                ]
            }
            Op::MulRow => {
                let (a, s) = (pv(0), pv(1));
                let c = a.cols();
                let mut ga = g.clone();
                let mut gs = vec![0.0; c];
                for r in 0..a.rows() {
                    let gr = ga.row_slice_mut(r);
                    for j in 0..c {
                        gs[j] += gr[j] * a.at(r, j);
                        gr[j] *= s.data()[j];
                    }
                }
                vec![Some(ga), Some(Tensor::new(s.shape(), gs))]
            }
            Op::MulCol => {
                let (a, s) = (pv(0), pv(1));
                let mut ga = g.clone();
                let mut gs = vec![0.0; a.rows()];
                for r in 0..a.rows() {
                    let sr = s.data()[r];
                    let gr = ga.row_slice_mut(r);
                    let mut acc = 0.0;
                    for (j, gv) in gr.iter_mut().enumerate() {
                        acc += *gv * a.at(r, j);
                        *gv *= sr;
                    }
                    gs[r] = acc;
                }
                vec![Some(ga), Some(Tensor::new(s.shape(), gs))]
            }
            Op::Scale(k) => vec![Some(g.map(|x| x * k))],
            Op::Offset | Op::Reshape => {
                vec![Some(reshape_like(g.clone(), pv(0)))]
            }
            Op::MatMul => {
                let (a, b) = (pv(0), pv(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let ga = self.wants(node, 0).then(|| {
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut out, false);
                    Tensor::new(a.shape(), out)
                });
                let gb = self.wants(node, 1).then(|| {
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut out, false);
                    Tensor::new(b.shape(), out)
                });
                vec![ga, gb]
            }
            Op::Transpose => vec![Some(g.transpose2())],
            Op::Relu => vec![Some(g.zip_map(pv(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Tanh => vec![Some(g.zip_map(y, |g, y| g * (1.0 - y * y)))],
            Op::Sigmoid => vec![Some(g.zip_map(y, |g, y| g * y * (1.0 - y)))],
            Op::Exp => vec![Some(g.zip_map(y, |g, y| g * y))],
            Op::Log => vec![Some(g.zip_map(pv(0), |g, x| g / x))],
            Op::Sin => vec![Some(g.zip_map(pv(0), |g, x| g * x.cos()))],
            Op::Cos => vec![Some(g.zip_map(pv(0), |g, x| -g * x.sin()))],
            Op::Abs => vec![Some(g.zip_map(pv(0), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))],
            Op::Square => vec![Some(g.zip_map(pv(0), |g, x| 2.0 * g * x))],
            Op::Sqrt => vec![Some(g.zip_map(y, |g, y| g / (2.0 * y)))],
            Op::Clamp(lo, hi) => vec![Some(g.zip_map(pv(0), |g, x| {
                if x >= *lo && x <= *hi {
                    g
                } else {
                    0.0
                }
            }))],
            Op::SoftmaxRows => {
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = ga.row_slice_mut(r);
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(ga)]
            }
            Op::NormalizeRows(eps) => {
                let x = pv(0);
                let mut ga = g.clone();
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let n2 = xr.iter().map(|v| v * v).sum::<f64>() + eps * eps;
                    let n = n2.sqrt();
                    let gr = ga.row_slice_mut(r);
                    let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    for (gv, xv) in gr.iter_mut().zip(xr) {
                        *gv = (*gv - xv * dot / n2) / n;
                    }
                }
                vec![Some(ga)]
            }
            Op::LayerNormRows(eps) => {
                let x = pv(0);
                let mut ga = g.clone();
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let nf = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let sd = (var + eps).sqrt();
                    let yr = y.row_slice(r);
                    let gr = ga.row_slice_mut(r);
                    let gmean = gr.iter().sum::<f64>() / nf;
                    let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = (*gv - gmean - yv * gy) / sd;
                    }
                }
                vec![Some(ga)]
            }
            Op::Sum => {
                let a = pv(0);
                vec![Some(Tensor::full(a.shape(), g.item()))]
            }
            Op::Mean => {
                let a = pv(0);
                vec![Some(Tensor::full(a.shape(), g.item() / a.len() as f64))]
            }
            Op::ConcatCols(widths) => {
                let total: usize = widths.iter().sum();
                let rows = g.rows();
                let mut off = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let o = off;
                        off += w;
                        self.wants(node, k).then(|| {
                            let mut out = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                out.extend_from_slice(&g.data()[r * total + o..r * total + o + w]);
                            }
                            Tensor::new(pv(k).shape(), out)
                        })
                    })
                    .collect()
            }
            Op::SliceCols(start) => {
                let a = pv(0);
                let (rows, cols, w) = (a.rows(), a.cols(), g.cols());
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                }
                vec![Some(Tensor::new(a.shape(), out))]
            }
            Op::GatherRows(idx) => {
                let a = pv(0);
                let c = a.cols();
                let mut out = Tensor::zeros(a.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in out.row_slice_mut(i).iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *o += v;
                    }
                }
                vec![Some(out)]
            }
            Op::BroadcastRows => {
                let a = pv(0);
                vec![Some(Tensor::new(a.shape(), col_sums(g)))]
            }
            Op::GroupMax(arg) => {
                let a = pv(0);
                let c = a.cols();
                let mut out = Tensor::zeros(a.shape());
                for (k, &r) in arg.iter().enumerate() {
                    out.data_mut()[r * c + k % c] += g.data()[k];
                }
                vec![Some(out)]
            }
            Op::BatchedMatVec3 => {
                let (m, x) = (pv(0), pv(1));
                let n = x.rows();
                let mut gm = vec![0.0; n * 9];
                let mut gx = vec![0.0; n * 3];
                for r in 0..n {
                    let a = m.row_slice(r);
                    let v = x.row_slice(r);
                    let gr = g.row_slice(r);
                    for i in 0..3 {
                        for j in 0..3 {
                            gm[r * 9 + i * 3 + j] = gr[i] * v[j];
                            gx[r * 3 + j] += a[i * 3 + j] * gr[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(m.shape(), gm)),
                    Some(Tensor::new(x.shape(), gx)),
                ]
            }
            Op::Custom(c) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                c.backward(&inputs, y, g)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
