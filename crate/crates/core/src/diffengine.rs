//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records operations in execution order. Variables ("leaves")
//! own contiguous slices of one flat parameter vector, so optimisers work
//! on plain `Vec`s: [`Tape::forward`] replays the recorded graph for a new
//! parameter vector and [`Tape::backward`] returns the gradient in the same
//! layout. Constants hold data and never receive adjoints.
//!
//! Binary operations broadcast any operand dimension of size 1.

use std::sync::Arc;

use crate::scalar::{silu, silu_deriv, Scalar};
use crate::splines::{KnotVector, MAX_SPLINE_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("node index {index} out of range for tape of {len} nodes")]
    OutOfRange { index: usize, len: usize },
    #[error("leaf vector has length {got}, expected {expected}")]
    LeafLength { expected: usize, got: usize },
    #[error("backward called before forward")]
    NotEvaluated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Sin,
    Cos,
    Tan,
    Tanh,
    Atan,
    Abs,
    Sqrt,
    Silu,
}

impl UnaryOp {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Neg => -x,
            Self::Exp => x.exp(),
            Self::Ln => x.ln(),
            Self::Sin => x.sin(),
            Self::Cos => x.cos(),
            Self::Tan => x.tan(),
            Self::Tanh => x.tanh(),
            Self::Atan => x.atan(),
            Self::Abs => x.abs(),
            Self::Sqrt => x.sqrt(),
            Self::Silu => silu(x),
        }
    }

    /// d op / dx given input `x` and output `y`.
    fn deriv<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Self::Neg => -T::one(),
            Self::Exp => y,
            Self::Ln => x.recip(),
            Self::Sin => x.cos(),
            Self::Cos => -x.sin(),
            Self::Tan => T::one() + y * y,
            Self::Tanh => T::one() - y * y,
            Self::Atan => (T::one() + x * x).recip(),
            Self::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Self::Sqrt => (y + y).recip(),
            Self::Silu => silu_deriv(x),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Neg => "neg",
            Self::Exp => "exp",
            Self::Ln => "ln",
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Tan => "tan",
            Self::Tanh => "tanh",
            Self::Atan => "atan",
            Self::Abs => "abs",
            Self::Sqrt => "sqrt",
            Self::Silu => "silu",
        }
    }
}

/// Fixed sparse linear map applied down the rows of its operand.
///
/// Row `r` of the output is `sum_(j, w) w * input[j]` over the entries of
/// `rows[r]`, independently for every column.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOp<T: Scalar> {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseOp<T> {
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    /// Selects the given input rows.
    pub fn select(in_rows: usize, keep: &[usize]) -> Self {
        Self {
            in_rows,
            rows: keep.iter().map(|&j| vec![(j, T::one())]).collect(),
        }
    }

    /// Composition `self . inner`.
    pub fn compose(&self, inner: &Self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut acc: Vec<(usize, T)> = Vec::new();
                for &(j, w) in row {
                    for &(m, v) in &inner.rows[j] {
                        match acc.iter_mut().find(|(i, _)| *i == m) {
                            Some(e) => e.1 += w * v,
                            None => acc.push((m, w * v)),
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                acc
            })
            .collect();
        Self {
            in_rows: inner.in_rows,
            rows,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf {
        offset: usize,
    },
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Unary(NodeId, UnaryOp),
    Powi(NodeId, i32),
    Scale(NodeId, T),
    Sum(NodeId),
    Mean(NodeId),
    Column(NodeId, usize),
    Spline {
        x: NodeId,
        coeffs: NodeId,
        knots: Arc<KnotVector<T>>,
    },
    Fourier {
        x: NodeId,
        grid: usize,
    },
    Sparse {
        x: NodeId,
        op: Arc<SparseOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Unary(_, u) => u.name(),
            Op::Powi(..) => "powi",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Column(..) => "column",
            Op::Spline { .. } => "spline",
            Op::Fourier { .. } => "fourier",
            Op::Sparse { .. } => "sparse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    /// Spline cache: per element `k + 1` basis values then the spline slope.
    aux: Vec<T>,
    aux_first: Vec<usize>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_len: usize,
    adjoints: Vec<Vec<T>>,
    evaluated: bool,
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(
            x == y || x == 1 || y == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_len: 0,
            adjoints: Vec::new(),
            evaluated: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total length of the flat leaf vector.
    pub fn leaf_len(&self) -> usize {
        self.leaf_len
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Flat leaf vector reflecting the current leaf values.
    pub fn leaf_values(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.leaf_len];
        for n in &self.nodes {
            if let Op::Leaf { offset } = n.op {
                out[offset..offset + n.value.len()].copy_from_slice(&n.value);
            }
        }
        out
    }

    /// Offset of a leaf inside the flat leaf vector.
    pub fn leaf_offset(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id.0].op {
            Op::Leaf { offset } => Some(offset),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { .. } => true,
            Op::Constant => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Spline { x, coeffs, .. } => {
                self.nodes[x.0].needs_grad || self.nodes[coeffs.0].needs_grad
            }
            Op::Unary(a, _)
            | Op::Powi(a, _)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Column(a, _)
            | Op::Fourier { x: a, .. }
            | Op::Sparse { x: a, .. } => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: vec![T::zero(); rows * cols],
            aux: Vec::new(),
            aux_first: Vec::new(),
            needs_grad,
        });
        let id = self.nodes.len() - 1;
        self.eval_node(id);
        NodeId(id)
    }

    /// Variable of shape `rows x cols` appended to the flat leaf vector.
    pub fn leaf(&mut self, rows: usize, cols: usize, init: &[T]) -> NodeId {
        assert_eq!(init.len(), rows * cols, "leaf init length");
        let offset = self.leaf_len;
        self.leaf_len += rows * cols;
        let id = self.push(Op::Leaf { offset }, rows, cols);
        self.nodes[id.0].value.copy_from_slice(init);
        id
    }

    pub fn scalar_leaf(&mut self, v: T) -> NodeId {
        self.leaf(1, 1, &[v])
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> NodeId {
        assert_eq!(data.len(), rows * cols, "constant length");
        let id = self.push(Op::Constant, rows, cols);
        self.nodes[id.0].value = data;
        id
    }

    pub fn column_constant(&mut self, data: Vec<T>) -> NodeId {
        let n = data.len();
        self.constant(n, 1, data)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op<T>) -> NodeId {
        let (r, c) = broadcast_shape(self.shape(a), self.shape(b));
        self.push(make(a, b), r, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        self.push(Op::MatMul(a, b), m, n)
    }

    pub fn unary(&mut self, a: NodeId, op: UnaryOp) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Unary(a, op), r, c)
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Powi(a, n), r, c)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, s), r, c)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), 1, 1)
    }

    /// Column `j` as a `rows x 1` node.
    pub fn column(&mut self, a: NodeId, j: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(j < c, "column {j} out of {c}");
        self.push(Op::Column(a, j), r, 1)
    }

    /// Elementwise `sum_i coeffs_i B_i(x)`, differentiable in `x` and `coeffs`.
    pub fn spline(&mut self, x: NodeId, coeffs: NodeId, knots: Arc<KnotVector<T>>) -> NodeId {
        let (r, c) = self.shape(x);
        let (cr, cc) = self.shape(coeffs);
        assert_eq!(cr * cc, knots.num_basis(), "spline coefficient count");
        self.push(Op::Spline { x, coeffs, knots }, r, c)
    }

    /// Maps `n x d` input to `n x 2dG` features; column `2 (i G + k - 1)`
    /// holds `cos(k x_i)` and the next one `sin(k x_i)`, for `k = 1..=G`.
    pub fn fourier(&mut self, x: NodeId, grid: usize) -> NodeId {
        let (r, d) = self.shape(x);
        self.push(Op::Fourier { x, grid }, r, 2 * d * grid)
    }

    pub fn sparse(&mut self, x: NodeId, op: Arc<SparseOp<T>>) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(r, op.in_rows, "sparse operator input rows");
        let out = op.rows.len();
        self.push(Op::Sparse { x, op }, out, c)
    }

    /// `mean((a - target)^2)`.
    pub fn mse(&mut self, a: NodeId, target: NodeId) -> NodeId {
        let d = self.sub(a, target);
        let sq = self.powi(d, 2);
        self.mean(sq)
    }

    fn eval_node(&mut self, i: usize) {
        let (before, rest) = self.nodes.split_at_mut(i);
        let node = &mut rest[0];
        let (rows, cols) = (node.rows, node.cols);
        let out = &mut node.value;
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (na, nb) = (&before[a.0], &before[b.0]);
                let f: fn(T, T) -> T = match node.op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                if na.value.len() == out.len() && nb.value.len() == out.len() {
                    for ((o, &x), &y) in out.iter_mut().zip(&na.value).zip(&nb.value) {
                        *o = f(x, y);
                    }
                } else {
                    for r in 0..rows {
                        for c in 0..cols {
                            out[r * cols + c] = f(
                                na.value[bidx(r, c, na.rows, na.cols)],
                                nb.value[bidx(r, c, nb.rows, nb.cols)],
                            );
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&before[a.0], &before[b.0]);
                let k = na.cols;
                out.iter_mut().for_each(|v| *v = T::zero());
                for r in 0..rows {
                    let orow = &mut out[r * cols..(r + 1) * cols];
                    for t in 0..k {
                        let av = na.value[r * k + t];
                        if av == T::zero() {
                            continue;
                        }
                        let brow = &nb.value[t * cols..(t + 1) * cols];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            Op::Unary(a, u) => {
                for (o, &x) in out.iter_mut().zip(&before[a.0].value) {
                    *o = u.apply(x);
                }
            }
            Op::Powi(a, n) => {
                for (o, &x) in out.iter_mut().zip(&before[a.0].value) {
                    *o = x.powi(*n);
                }
            }
            Op::Scale(a, s) => {
                for (o, &x) in out.iter_mut().zip(&before[a.0].value) {
                    *o = *s * x;
                }
            }
            Op::Sum(a) => out[0] = before[a.0].value.iter().copied().sum(),
            Op::Mean(a) => {
                let v = &before[a.0].value;
                out[0] = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len());
            }
            Op::Column(a, j) => {
                let na = &before[a.0];
                for r in 0..rows {
                    out[r] = na.value[r * na.cols + j];
                }
            }
            Op::Spline { x, coeffs, knots } => {
                let xs = &before[x.0].value;
                let cs = &before[coeffs.0].value;
                let width = knots.order() + 2;
                node.aux.resize(xs.len() * width, T::zero());
                node.aux_first.resize(xs.len(), 0);
                for (e, &xv) in xs.iter().enumerate() {
                    let lb = knots.local_basis(xv);
                    out[e] = lb.dot(cs);
                    let slot = &mut node.aux[e * width..(e + 1) * width];
                    slot[..lb.len].copy_from_slice(&lb.values[..lb.len]);
                    slot[width - 1] = lb.dot_deriv(cs);
                    node.aux_first[e] = lb.first;
                }
            }
            Op::Fourier { x, grid } => {
                let nx = &before[x.0];
                let d = nx.cols;
                let g = *grid;
                for r in 0..rows {
                    for i in 0..d {
                        let xv = nx.value[r * d + i];
                        let (s1, c1) = xv.sin_cos();
                        let (mut s, mut c) = (s1, c1);
                        for k in 0..g {
                            let col = 2 * (i * g + k);
                            out[r * cols + col] = c;
                            out[r * cols + col + 1] = s;
                            // angle addition for the next harmonic
                            let (sn, cn) = (s * c1 + c * s1, c * c1 - s * s1);
                            s = sn;
                            c = cn;
                        }
                    }
                }
            }
            Op::Sparse { x, op } => {
                let nx = &before[x.0];
                for (r, row) in op.rows.iter().enumerate() {
                    for c in 0..cols {
                        let mut acc = T::zero();
                        for &(j, w) in row {
                            acc += w * nx.value[j * cols + c];
                        }
                        out[r * cols + c] = acc;
                    }
                }
            }
        }
    }

    /// Replays every recorded operation for new leaf values and returns the
    /// value of the last node.
    pub fn forward(&mut self, leaf_values: &[T]) -> Result<&[T], TapeError> {
        if leaf_values.len() != self.leaf_len {
            return Err(TapeError::LeafLength {
                expected: self.leaf_len,
                got: leaf_values.len(),
            });
        }
        self.evaluated = false;
        for i in 0..self.nodes.len() {
            if let Op::Leaf { offset } = self.nodes[i].op {
                let n = self.nodes[i].value.len();
                self.nodes[i]
                    .value
                    .copy_from_slice(&leaf_values[offset..offset + n]);
            } else if !matches!(self.nodes[i].op, Op::Constant) {
                self.eval_node(i);
            }
            let node = &self.nodes[i];
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        self.evaluated = true;
        Ok(self.nodes.last().map(|n| n.value.as_slice()).unwrap_or(&[]))
    }

    /// Gradient of the sum of `output`'s entries with respect to the flat
    /// leaf vector.
    pub fn backward(&mut self, output: NodeId) -> Result<Vec<T>, TapeError> {
        if output.0 >= self.nodes.len() {
            return Err(TapeError::OutOfRange {
                index: output.0,
                len: self.nodes.len(),
            });
        }
        if !self.evaluated {
            return Err(TapeError::NotEvaluated);
        }
        let n = output.0 + 1;
        self.adjoints.resize_with(self.nodes.len(), Vec::new);
        for i in 0..n {
            let len = if self.nodes[i].needs_grad {
                self.nodes[i].value.len()
            } else {
                0
            };
            let adj = &mut self.adjoints[i];
            adj.clear();
            adj.resize(len, T::zero());
        }
        self.adjoints[output.0]
            .iter_mut()
            .for_each(|g| *g = T::one());

        let mut grad = vec![T::zero(); self.leaf_len];
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (adj_before, adj_rest) = self.adjoints.split_at_mut(i);
            let g = &adj_rest[0];
            let node = &self.nodes[i];
            if g.iter().all(|v| *v == T::zero()) && !matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf { offset } => {
                    grad[*offset..*offset + g.len()].copy_from_slice(g);
                }
                Op::Constant => {}
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let kind = match node.op {
                        Op::Add(..) => 0,
                        Op::Sub(..) => 1,
                        _ => 2,
                    };
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g[r * cols + c];
                            let ia = bidx(r, c, na.rows, na.cols);
                            let ib = bidx(r, c, nb.rows, nb.cols);
                            let (da, db) = match kind {
                                0 => (gv, gv),
                                1 => (gv, -gv),
                                _ => (gv * nb.value[ib], gv * na.value[ia]),
                            };
                            if na.needs_grad {
                                adj_before[a.0][ia] += da;
                            }
                            if nb.needs_grad {
                                adj_before[b.0][ib] += db;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
                    let k = na.cols;
                    if na.needs_grad {
                        // dA = G B^T
                        let ga = &mut adj_before[a.0];
                        for r in 0..rows {
                            let grow = &g[r * cols..(r + 1) * cols];
                            for t in 0..k {
                                let brow = &nb.value[t * cols..(t + 1) * cols];
                                let mut acc = T::zero();
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                ga[r * k + t] += acc;
                            }
                        }
                    }
                    if nb.needs_grad {
                        // dB = A^T G
                        let gb = &mut adj_before[b.0];
                        for r in 0..rows {
                            let grow = &g[r * cols..(r + 1) * cols];
                            for t in 0..k {
                                let av = na.value[r * k + t];
                                let brow = &mut gb[t * cols..(t + 1) * cols];
                                for (o, &gv) in brow.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::Unary(a, u) => {
                    let xa = &self.nodes[a.0].value;
                    let ga = &mut adj_before[a.0];
                    for e in 0..g.len() {
                        ga[e] += g[e] * u.deriv(xa[e], node.value[e]);
                    }
                }
                Op::Powi(a, p) => {
                    let xa = &self.nodes[a.0].value;
                    let ga = &mut adj_before[a.0];
                    let pf = T::lit(*p as f64);
                    for e in 0..g.len() {
                        ga[e] += g[e] * pf * xa[e].powi(*p - 1);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = &mut adj_before[a.0];
                    for e in 0..g.len() {
                        ga[e] += *s * g[e];
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let ga = &mut adj_before[a.0];
                    let mut gv = g[0];
                    if matches!(node.op, Op::Mean(_)) {
                        gv /= T::from_usize_lossy(ga.len());
                    }
                    ga.iter_mut().for_each(|v| *v += gv);
                }
                Op::Column(a, j) => {
                    let ca = self.nodes[a.0].cols;
                    let ga = &mut adj_before[a.0];
                    for r in 0..rows {
                        ga[r * ca + j] += g[r];
                    }
                }
                Op::Spline { x, coeffs, knots } => {
                    let width = knots.order() + 2;
                    let nb = knots.order() + 1;
                    if self.nodes[x.0].needs_grad {
                        let gx = &mut adj_before[x.0];
                        for e in 0..g.len() {
                            gx[e] += g[e] * node.aux[e * width + width - 1];
                        }
                    }
                    if self.nodes[coeffs.0].needs_grad {
                        let gc = &mut adj_before[coeffs.0];
                        for e in 0..g.len() {
                            let first = node.aux_first[e];
                            let slot = &node.aux[e * width..e * width + nb];
                            for (q, &bv) in slot.iter().enumerate() {
                                gc[first + q] += g[e] * bv;
                            }
                        }
                    }
                    debug_assert!(nb <= MAX_SPLINE_ORDER + 1);
                }
                Op::Fourier { x, grid } => {
                    let d = self.nodes[x.0].cols;
                    let gx = &mut adj_before[x.0];
                    for r in 0..rows {
                        for i in 0..d {
                            let mut acc = T::zero();
                            for k in 0..*grid {
                                let col = r * cols + 2 * (i * grid + k);
                                let kf = T::from_usize_lossy(k + 1);
                                // d cos(kx) = -k sin(kx), d sin(kx) = k cos(kx)
                                acc += kf
                                    * (g[col + 1] * node.value[col] - g[col] * node.value[col + 1]);
                            }
                            gx[r * d + i] += acc;
                        }
                    }
                }
                Op::Sparse { x, op } => {
                    let gx = &mut adj_before[x.0];
                    for (r, row) in op.rows.iter().enumerate() {
                        for c in 0..cols {
                            let gv = g[r * cols + c];
                            for &(j, w) in row {
                                gx[j * cols + c] += w * gv;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Largest relative error between the tape gradient of `output` and
    /// central finite differences with the given step, measured as
    /// `|analytic - numeric| / (|analytic| + 1e-12)` over all leaves.
    pub fn grad_check(
        &mut self,
        leaf_values: &[T],
        output: NodeId,
        step: T,
    ) -> Result<T, TapeError> {
        self.forward(leaf_values)?;
        let analytic = self.backward(output)?;
        let mut probe = leaf_values.to_vec();
        let mut worst = T::zero();
        let two = T::lit(2.0);
        for p in 0..probe.len() {
            let orig = probe[p];
            probe[p] = orig + step;
            self.forward(&probe)?;
            let up: T = self.value(output).iter().copied().sum();
            probe[p] = orig - step;
            self.forward(&probe)?;
            let down: T = self.value(output).iter().copied().sum();
            probe[p] = orig;
            let numeric = (up - down) / (two * step);
            let err = (analytic[p] - numeric).abs() / (analytic[p].abs() + T::lit(1e-12));
            worst = worst.max(err);
        }
        self.forward(leaf_values)?;
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn square_forward_and_backward() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(3.0);
        let y = t.powi(x, 2);
        assert_eq!(t.forward(&[3.0]).unwrap(), &[9.0]);
        assert_eq!(t.backward(y).unwrap(), vec![6.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(0.0);
        let y = t.unary(x, UnaryOp::Tanh);
        assert_eq!(t.forward(&[0.0]).unwrap(), &[0.0]);
        assert_eq!(t.backward(y).unwrap(), vec![1.0]);
    }

    #[test]
    fn x_sin_x() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(PI / 2.0);
        let s = t.unary(x, UnaryOp::Sin);
        let y = t.mul(x, s);
        let v = t.forward(&[PI / 2.0]).unwrap()[0];
        assert!((v - PI / 2.0).abs() < 1e-15);
        // d/dx x sin x = sin x + x cos x = 1 at pi/2
        assert!((t.backward(y).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_of_sines_matches_finite_differences() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(2, 1, &[0.1, 0.2]);
        let s = t.unary(x, UnaryOp::Sin);
        let y = t.sum(s);
        t.forward(&[0.1, 0.2]).unwrap();
        let g = t.backward(y).unwrap();
        let h = 1e-6;
        let fd = |x0: f64| ((x0 + h).sin() - (x0 - h).sin()) / (2.0 * h);
        assert!((g[0] - fd(0.1)).abs() < 1e-9 && (g[0] - 0.1f64.cos()).abs() < 1e-15);
        assert!((g[1] - fd(0.2)).abs() < 1e-9 && (g[1] - 0.2f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn non_finite_names_node() {
        let mut t = Tape::<f64>::new();
        let x = t.scalar_leaf(1.0);
        let _ = t.unary(x, UnaryOp::Ln);
        let err = t.forward(&[-1.0]).unwrap_err();
        assert_eq!(err, TapeError::NonFinite { node: 1, op: "ln" });
        assert!(matches!(
            t.backward(NodeId(1)),
            Err(TapeError::NotEvaluated)
        ));
    }

    #[test]
    fn backward_rejects_unknown_output() {
        let mut t = Tape::<f64>::new();
        let _ = t.scalar_leaf(1.0);
        t.forward(&[1.0]).unwrap();
        assert!(matches!(
            t.backward(NodeId(5)),
            Err(TapeError::OutOfRange { index: 5, len: 1 })
        ));
        assert!(matches!(
            t.forward(&[1.0, 2.0]),
            Err(TapeError::LeafLength { .. })
        ));
    }

    #[test]
    fn polynomial_grad_check() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(1, 3, &[0.5, -1.2, 2.0]);
        let c = t.constant(1, 3, vec![1.0, 2.0, -0.5]);
        let p3 = t.powi(x, 3);
        let term = t.mul(p3, c);
        let p2 = t.powi(x, 2);
        let both = t.add(term, p2);
        let y = t.sum(both);
        let err = t.grad_check(&[0.5, -1.2, 2.0], y, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_broadcast_and_column() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(3, 2, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6]);
        let w = t.leaf(2, 2, &[1.0, -2.0, 0.5, 0.25]);
        let b = t.leaf(1, 2, &[0.1, -0.1]);
        let h = t.matmul(x, w);
        let hb = t.add(h, b);
        let a = t.unary(hb, UnaryOp::Tanh);
        let c1 = t.column(a, 1);
        let y = t.sum(c1);
        let leaves = t.leaf_values();
        let err = t.grad_check(&leaves, y, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn spline_primitive_gradients() {
        let knots = Arc::new(KnotVector::<f64>::unit(5, 3).unwrap());
        let mut t = Tape::<f64>::new();
        let init_c: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = t.leaf(4, 1, &[0.13, 0.55, 0.91, 1.07]);
        let c = t.leaf(1, 8, &init_c);
        let s = t.spline(x, c, knots);
        let y = t.sum(s);
        let leaves = t.leaf_values();
        let err = t.grad_check(&leaves, y, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fourier_primitive_values_and_gradients() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(2, 2, &[0.3, 0.8, -0.4, 0.1]);
        let f = t.fourier(x, 3);
        let v = t.value(f).to_vec();
        assert_eq!(v.len(), 2 * 12);
        // row 1, input 0, harmonic 3
        assert!((v[12 + 4] - (3.0 * -0.4f64).cos()).abs() < 1e-14);
        assert!((v[12 + 5] - (3.0 * -0.4f64).sin()).abs() < 1e-14);
        let w = t.constant(12, 1, (0..12).map(|i| 0.1 * i as f64 - 0.3).collect());
        let o = t.matmul(f, w);
        let y = t.sum(o);
        let leaves = t.leaf_values();
        assert!(t.grad_check(&leaves, y, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn sparse_operator_gradients() {
        let op = Arc::new(SparseOp {
            in_rows: 3,
            rows: vec![vec![(0, -1.0), (2, 1.0)], vec![(1, 2.0)]],
        });
        let mut t = Tape::<f64>::new();
        let x = t.leaf(3, 1, &[1.0, 2.0, 4.0]);
        let s = t.sparse(x, op);
        assert_eq!(t.value(s), &[3.0, 4.0]);
        let q = t.powi(s, 2);
        let y = t.sum(q);
        assert_eq!(t.backward(y).unwrap(), vec![-6.0, 16.0, 6.0]);
    }

    #[test]
    fn sparse_compose_matches_sequential_application() {
        let d = SparseOp {
            in_rows: 3,
            rows: vec![
                vec![(0, -1.0), (1, 1.0)],
                vec![(0, -0.5), (2, 0.5)],
                vec![(1, -1.0), (2, 1.0)],
            ],
        };
        let dd = d.compose(&d);
        let x = [1.0, 4.0, 9.0];
        assert_eq!(dd.apply(&x), d.apply(&d.apply(&x)));
    }

    #[test]
    fn replay_is_deterministic() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(1, 2, &[0.3, 0.9]);
        let e = t.unary(x, UnaryOp::Exp);
        let y = t.mean(e);
        let a = t.forward(&[0.31, 0.77]).unwrap().to_vec();
        let ga = t.backward(y).unwrap();
        t.forward(&[5.0, 1.0]).unwrap();
        let b = t.forward(&[0.31, 0.77]).unwrap().to_vec();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(ga, t.backward(y).unwrap());
    }

    fn unary_cases() -> Vec<(UnaryOp, f64, f64)> {
        vec![
            (UnaryOp::Neg, -3.0, 3.0),
            (UnaryOp::Exp, -3.0, 3.0),
            (UnaryOp::Ln, 0.1, 5.0),
            (UnaryOp::Sin, -3.0, 3.0),
            (UnaryOp::Cos, -3.0, 3.0),
            (UnaryOp::Tan, -1.2, 1.2),
            (UnaryOp::Tanh, -3.0, 3.0),
            (UnaryOp::Atan, -3.0, 3.0),
            (UnaryOp::Abs, -3.0, 3.0),
            (UnaryOp::Sqrt, 0.1, 5.0),
            (UnaryOp::Silu, -3.0, 3.0),
        ]
    }

    proptest! {
        #[test]
        fn primitives_match_finite_differences(u in 0.0f64..1.0, which in 0usize..11) {
            let (op, lo, hi) = unary_cases()[which];
            let x0 = lo + (hi - lo) * u;
            prop_assume!(op != UnaryOp::Abs || x0.abs() > 1e-3);
            let mut t = Tape::<f64>::new();
            let x = t.scalar_leaf(x0);
            let y = t.unary(x, op);
            let err = t.grad_check(&[x0], y, 1e-6).unwrap();
            prop_assert!(err < 1e-5, "{:?} at {}: {}", op, x0, err);
        }

        #[test]
        fn backward_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, x0 in -1.5f64..1.5) {
            // f = sin x, g = x^3 ; h = a f + b g
            let build = |ca: f64, cb: f64| {
                let mut t = Tape::<f64>::new();
                let x = t.scalar_leaf(x0);
                let f = t.unary(x, UnaryOp::Sin);
                let g = t.powi(x, 3);
                let fa = t.scale(f, ca);
                let gb = t.scale(g, cb);
                let h = t.add(fa, gb);
                t.forward(&[x0]).unwrap();
                t.backward(h).unwrap()[0]
            };
            let lhs = build(a, b);
            let rhs = a * build(1.0, 0.0) + b * build(0.0, 1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
