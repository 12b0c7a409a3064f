use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations with analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Log,
    Exp,
    Softplus,
    Sigmoid,
    Neg,
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        lambda: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    RowLogSumExp {
        x: Var,
        softmax: Matrix,
    },
    MeanSubset {
        x: Var,
        idx: Vec<usize>,
    },
    Unary(UnaryOp, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Matrix),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    SelectEntries {
        x: Var,
        cols: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        offsets: Vec<usize>,
    },
    NeighborSum {
        x: Var,
        neighbors: Rc<Vec<Vec<usize>>>,
        self_weight: f64,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    RowNormalize {
        x: Var,
        inv_norm: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, lambda, .. } => vec![*x, *gamma, *lambda],
            Op::Relu(x)
            | Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::MulConst(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowLogSumExp { x, .. }
            | Op::MeanSubset { x, .. }
            | Op::Clamp { x, .. }
            | Op::SelectEntries { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::NeighborSum { x, .. }
            | Op::GroupMean { x, .. }
            | Op::RowNormalize { x, .. } => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RowLogSumExp { .. } => "row_logsumexp",
            Op::MeanSubset { .. } => "reduce_mean_subset",
            Op::Unary(UnaryOp::Log, _) => "log",
            Op::Unary(UnaryOp::Exp, _) => "exp",
            Op::Unary(UnaryOp::Softplus, _) => "softplus",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Neg, _) => "neg",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SelectEntries { .. } => "select_entries",
            Op::SegmentMean { .. } => "segment_mean",
            Op::NeighborSum { .. } => "neighbor_sum",
            Op::GroupMean { .. } => "group_mean",
            Op::RowNormalize { .. } => "row_normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records matrix operations in creation order and runs the reverse sweep.
///
/// Every op appends one node whose parents already live on the tape, so the
/// node vector is a topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant (no gradient is propagated into it).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, leaf_grad: bool) -> Var {
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b`, with the `1 x b` bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} for weight {:?}", bv.shape(), wv.shape()),
            ));
        }
        let mut out = xv
            .matmul(wv)
            .map_err(|_| Error::shape("linear", format!("{:?} x {:?}", xv.shape(), wv.shape())))?;
        let bias = bv.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), false))
    }

    /// Elementwise `max(0, x)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), false)
    }

    /// Per-row standardization followed by `gamma ⊙ xhat + lambda`.
    /// Mean and variance are computed from the row (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, lambda: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("layer_norm epsilon must be > 0, got {epsilon}")));
        }
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (gv, lv) = (self.value(gamma), self.value(lambda));
        if gv.shape() != (1, d) || lv.shape() != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / lambda {:?} for input {:?}",
                    gv.shape(),
                    lv.shape(),
                    xv.shape()
                ),
            ));
        }
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[(i, j)] = h;
                out[(i, j)] = gv.as_slice()[j] * h + lv.as_slice()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                lambda,
                xhat,
                inv_std,
            },
            false,
        ))
    }

    /// Per-row `log Σ exp`, shifted by the row maximum.
    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, k) = xv.shape();
        let mut out = Matrix::zeros(n, 1);
        let mut softmax = Matrix::zeros(n, k);
        for i in 0..n {
            let row = xv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                softmax[(i, j)] = e;
                s += e;
            }
            out[(i, 0)] = m + s.ln();
            softmax.row_mut(i).iter_mut().for_each(|e| *e /= s);
        }
        self.push(out, Op::RowLogSumExp { x, softmax }, false)
    }

    /// Mean of the selected entries of an `n x 1` column.
    pub fn reduce_mean_subset(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::EmptyIndexSet("reduce_mean_subset"));
        }
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::shape(
                "reduce_mean_subset",
                format!("expected a column, got {:?}", xv.shape()),
            ));
        }
        let mut s = 0.0;
        for &i in idx {
            if i >= xv.rows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: xv.rows(),
                });
            }
            s += xv.as_slice()[i];
        }
        let out = Matrix::scalar(s / idx.len() as f64);
        Ok(self.push(out, Op::MeanSubset { x, idx: idx.to_vec() }, false))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match op {
            UnaryOp::Log => {
                for i in 0..xv.rows() {
                    for (j, &v) in xv.row(i).iter().enumerate() {
                        if !(v > 0.0) {
                            return Err(Error::Domain {
                                op: "log",
                                row: i,
                                col: j,
                                value: v,
                            });
                        }
                    }
                }
                xv.map(f64::ln)
            }
            UnaryOp::Exp => xv.map(f64::exp),
            UnaryOp::Softplus => xv.map(softplus),
            UnaryOp::Sigmoid => xv.map(sigmoid),
            UnaryOp::Neg => xv.map(|v| -v),
        };
        Ok(self.push(out, Op::Unary(op, x), false))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x).expect("exp is total")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Softplus, x).expect("softplus is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x).expect("neg is total")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), false))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), false)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), false)
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(out, Op::MulConst(x, c), false))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::EmptyIndexSet("mean"));
        }
        let out = Matrix::scalar(xv.sum() / xv.len() as f64);
        Ok(self.push(out, Op::Mean(x), false))
    }

    /// Picks `x[i, cols[i]]` for every row, giving an `n x 1` column.
    pub fn select_entries(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if cols.len() != xv.rows() {
            return Err(Error::shape(
                "select_entries",
                format!("{} column indices for {} rows", cols.len(), xv.rows()),
            ));
        }
        let mut out = Matrix::zeros(xv.rows(), 1);
        for (i, &c) in cols.iter().enumerate() {
            if c >= xv.cols() {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    len: xv.cols(),
                });
            }
            out[(i, 0)] = xv[(i, c)];
        }
        Ok(self.push(out, Op::SelectEntries { x, cols: cols.to_vec() }, false))
    }

    /// Row means over contiguous segments. `offsets` has one more entry than
    /// there are segments; segment `g` spans rows `offsets[g]..offsets[g + 1]`.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if offsets.len() < 2 || *offsets.last().unwrap() != xv.rows() || offsets[0] != 0 {
            return Err(Error::shape(
                "segment_mean",
                format!("offsets do not cover {} rows", xv.rows()),
            ));
        }
        let g = offsets.len() - 1;
        let mut out = Matrix::zeros(g, xv.cols());
        for s in 0..g {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi <= lo {
                return Err(Error::EmptyIndexSet("segment_mean"));
            }
            let inv = 1.0 / (hi - lo) as f64;
            for i in lo..hi {
                for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(i)) {
                    *o += v;
                }
            }
            out.row_mut(s).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                offsets: offsets.to_vec(),
            },
            false,
        ))
    }

    /// `self_weight · x_i + Σ_{j ∈ neighbors[i]} x_j` for every row `i`.
    pub fn neighbor_sum(&mut self, x: Var, neighbors: Rc<Vec<Vec<usize>>>, self_weight: f64) -> Result<Var> {
        let xv = self.value(x);
        if neighbors.len() != xv.rows() {
            return Err(Error::shape(
                "neighbor_sum",
                format!("{} neighbor lists for {} rows", neighbors.len(), xv.rows()),
            ));
        }
        let mut out = xv.scale(self_weight);
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                if j >= xv.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: j,
                        len: xv.rows(),
                    });
                }
                for c in 0..xv.cols() {
                    out[(i, c)] += xv[(j, c)];
                }
            }
        }
        Ok(self.push(
            out,
            Op::NeighborSum {
                x,
                neighbors,
                self_weight,
            },
            false,
        ))
    }

    /// Means of an `n x 1` column over several index groups, as a
    /// `groups.len() x 1` column. Indices may repeat across groups.
    pub fn group_mean(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::shape(
                "group_mean",
                format!("expected a column, got {:?}", xv.shape()),
            ));
        }
        let mut out = Matrix::zeros(groups.len(), 1);
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::EmptyIndexSet("group_mean"));
            }
            let mut acc = 0.0;
            for &k in idx {
                if k >= xv.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: k,
                        len: xv.rows(),
                    });
                }
                acc += xv[(k, 0)];
            }
            out[(g, 0)] = acc / idx.len() as f64;
        }
        Ok(self.push(out, Op::GroupMean { x, groups }, false))
    }

    /// `x_i / sqrt(‖x_i‖² + epsilon)` for every row.
    pub fn row_normalize(&mut self, x: Var, epsilon: f64) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::shape("row_normalize", format!("epsilon {epsilon} must be > 0")));
        }
        let mut out = self.value(x).clone();
        let mut inv_norm = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() + epsilon).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_norm.push(inv);
        }
        Ok(self.push(out, Op::RowNormalize { x, inv_norm }, false))
    }

    /// Zeroes every gradient and re-arms [`Tape::backward`].
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a `1 x 1` root. Afterwards `grad(v)` holds
    /// `∂root/∂v` for every node that depends on a parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let (r, c) = self.value(root).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        self.backward_done = true;
        self.nodes[root.0].grad = Matrix::scalar(1.0);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = self.local_grads(i)?;
            for (parent, g) in contributions {
                if self.nodes[parent.0].requires_grad {
                    self.nodes[parent.0].grad.add_assign(&g)?;
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let dy = &node.grad;
        let y = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                if needs(x) {
                    out.push((*x, dy.matmul_t(self.value(*w))?));
                }
                if needs(w) {
                    out.push((*w, self.value(*x).t_matmul(dy)?));
                }
                if needs(b) {
                    out.push((*b, dy.column_means().scale(dy.rows() as f64)));
                }
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    out.push((*a, dy.matmul_t(self.value(*b))?));
                }
                if needs(b) {
                    out.push((*b, self.value(*a).t_matmul(dy)?));
                }
            }
            Op::Relu(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| if v > 0.0 { d } else { 0.0 })?;
                out.push((*x, g));
            }
            Op::LayerNorm {
                x,
                gamma,
                lambda,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gamma).as_slice();
                if needs(gamma) {
                    let mut g = Matrix::zeros(1, d);
                    for r in 0..n {
                        for j in 0..d {
                            g[(0, j)] += dy[(r, j)] * xhat[(r, j)];
                        }
                    }
                    out.push((*gamma, g));
                }
                if needs(lambda) {
                    out.push((*lambda, dy.column_means().scale(n as f64)));
                }
                if needs(x) {
                    let mut g = Matrix::zeros(n, d);
                    let df = d as f64;
                    for r in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = dy[(r, j)] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[(r, j)];
                        }
                        for j in 0..d {
                            let dh = dy[(r, j)] * gv[j];
                            g[(r, j)] = inv_std[r] / df * (df * dh - sum_dh - xhat[(r, j)] * sum_dh_h);
                        }
                    }
                    out.push((*x, g));
                }
            }
            Op::RowLogSumExp { x, softmax } => {
                let mut g = softmax.clone();
                for r in 0..g.rows() {
                    let d = dy[(r, 0)];
                    g.row_mut(r).iter_mut().for_each(|v| *v *= d);
                }
                out.push((*x, g));
            }
            Op::MeanSubset { x, idx } => {
                let n = self.value(*x).rows();
                let mut g = Matrix::zeros(n, 1);
                let share = dy.item() / idx.len() as f64;
                for &k in idx {
                    g[(k, 0)] += share;
                }
                out.push((*x, g));
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x);
                let g = match op {
                    UnaryOp::Log => dy.zip_map(xv, |d, v| d / v)?,
                    UnaryOp::Exp => dy.zip_map(y, |d, e| d * e)?,
                    UnaryOp::Softplus => dy.zip_map(xv, |d, v| d * sigmoid(v))?,
                    UnaryOp::Sigmoid => dy.zip_map(y, |d, s| d * s * (1.0 - s))?,
                    UnaryOp::Neg => dy.scale(-1.0),
                };
                out.push((*x, g));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push((*a, dy.zip_map(self.value(*b), |d, v| d * v)?));
                }
                if needs(b) {
                    out.push((*b, dy.zip_map(self.value(*a), |d, v| d * v)?));
                }
            }
            Op::Scale(x, s) => out.push((*x, dy.scale(*s))),
            Op::AddScalar(x) => out.push((*x, dy.clone())),
            Op::MulConst(x, c) => out.push((*x, dy.zip_map(c, |d, v| d * v)?)),
            Op::Clamp { x, lo, hi } => {
                let g = self
                    .value(*x)
                    .zip_map(dy, |v, d| if v >= *lo && v <= *hi { d } else { 0.0 })?;
                out.push((*x, g));
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                out.push((*x, Matrix::filled(r, c, dy.item())));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                out.push((*x, Matrix::filled(r, c, dy.item() / (r * c) as f64)));
            }
            Op::SelectEntries { x, cols } => {
                let (r, c) = self.value(*x).shape();
                let mut g = Matrix::zeros(r, c);
                for (i, &k) in cols.iter().enumerate() {
                    g[(i, k)] = dy[(i, 0)];
                }
                out.push((*x, g));
            }
            Op::SegmentMean { x, offsets } => {
                let (r, c) = self.value(*x).shape();
                let mut g = Matrix::zeros(r, c);
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let inv = 1.0 / (hi - lo) as f64;
                    for i in lo..hi {
                        for (gv, d) in g.row_mut(i).iter_mut().zip(dy.row(s)) {
                            *gv = d * inv;
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::NeighborSum {
                x,
                neighbors,
                self_weight,
            } => {
                let mut g = dy.scale(*self_weight);
                let cols = dy.cols();
                for (i, nbrs) in neighbors.iter().enumerate() {
                    for &j in nbrs {
                        for c in 0..cols {
                            g[(j, c)] += dy[(i, c)];
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::GroupMean { x, groups } => {
                let mut g = Matrix::zeros(self.value(*x).rows(), 1);
                for (s, idx) in groups.iter().enumerate() {
                    let share = dy[(s, 0)] / idx.len() as f64;
                    for &k in idx {
                        g[(k, 0)] += share;
                    }
                }
                out.push((*x, g));
            }
            Op::RowNormalize { x, inv_norm } => {
                // d(x/s) = dx/s - y (y·dx)/s with s the regularized norm.
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                        *gv = inv_norm[r] * (dr[j] - yr[j] * dot);
                    }
                }
                out.push((*x, g));
            }
        }
        Ok(out)
    }
}
