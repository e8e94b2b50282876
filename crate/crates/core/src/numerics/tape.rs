//! Dynamic reverse-mode gradient tape.
//!
//! Every primitive appends a node holding its output and enough saved state
//! for its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! exact reverse order. Nodes that do not depend on a trainable leaf are
//! skipped entirely, so frozen weights cost nothing in the backward pass.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::matrix::{self, check_precision, gemm_nn, gemm_nt, gemm_tn, moments, Matrix, Precision};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
pub(crate) const CE_LOG_FLOOR: f64 = 1e-12;

/// How per-instance losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn divisor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    SumSquares(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        divisor: f64,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        divisor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Matrix>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over all gradients together.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.node(var).value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).get(0, 0)
    }

    fn node(&self, var: Var) -> &Node {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        &self.nodes[var.index]
    }

    fn owns(&self, var: Var) -> bool {
        var.tape == self.id && var.index < self.nodes.len()
    }

    fn push_node(&mut self, value: Matrix, op: Op, requires_grad: bool, trainable: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var { tape: self.id, index }
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.node(*v).requires_grad);
        self.push_node(value, op, requires_grad, false)
    }

    fn finish(&self, precision: Precision, rows: usize, cols: usize, mut data: Vec<f64>) -> Matrix {
        if precision == Precision::P32 {
            for x in &mut data {
                *x = precision.round(*x);
            }
        }
        Matrix::from_parts(rows, cols, precision, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        check_precision(av, bv, "matmul_nt")?;
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(av.as_slice(), bv.as_slice(), &mut out, m, k, n);
        let value = self.finish(av.precision(), m, n, out);
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: av.shape(),
                right: rv.shape(),
            });
        }
        check_precision(av, rv, "add_row")?;
        let bias = rv.as_slice();
        let data = av
            .as_slice()
            .chunks(av.cols())
            .flat_map(|r| r.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let value = self.finish(av.precision(), av.rows(), av.cols(), data);
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut data = av.as_slice().to_vec();
        for row in data.chunks_mut(av.cols()) {
            matrix::softmax_in_place(row);
        }
        let value = self.finish(av.precision(), av.rows(), av.cols(), data);
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise layer normalization with 1×n gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.shape() != (1, n) || bv.shape() != (1, n) {
            return Err(Error::Shape {
                op: "layer_norm_rows",
                left: xv.shape(),
                right: gv.shape(),
            });
        }
        check_precision(xv, gv, "layer_norm_rows")?;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.as_slice().chunks(n) {
            let (mean, is) = moments(row, eps);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.as_slice()[j] + bv.as_slice()[j]);
            }
        }
        let value = self.finish(xv.precision(), xv.rows(), n, out);
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let data = xv
            .as_slice()
            .chunks(xv.cols())
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let value = Matrix::from_parts(xv.rows(), len, xv.precision(), data);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::contract("concat of nothing"))?);
        let (rows, precision) = (first.rows(), first.precision());
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: first.shape(),
                    right: v.shape(),
                });
            }
            check_precision(first, v, "concat_cols")?;
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Matrix::from_parts(rows, cols, precision, data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::contract("concat of nothing"))?);
        let (cols, precision) = (first.cols(), first.precision());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: v.shape(),
                });
            }
            check_precision(first, v, "concat_rows")?;
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        let value = Matrix::from_parts(rows, cols, precision, data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of `src` by index (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for {} rows",
                sv.rows()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * sv.cols());
        for &i in index {
            data.extend_from_slice(sv.row(i));
        }
        let value = Matrix::from_parts(index.len(), sv.cols(), sv.precision(), data);
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            &[src],
        ))
    }

    /// Σ x², as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_parts(1, 1, av.precision(), vec![av.precision().round(av.sum_squares())]);
        self.push(value, Op::SumSquares(a), &[a])
    }

    /// Cross-entropy of softmax(logits) against class indices, fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let c = lv.cols();
        let mut probs = lv.as_slice().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            matrix::softmax_in_place(row);
            total -= row[y].max(CE_LOG_FLOOR).ln();
        }
        let divisor = reduction.divisor(labels.len());
        let value = Matrix::from_parts(1, 1, lv.precision(), vec![lv.precision().round(total / divisor)]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                divisor,
            },
            &[logits],
        ))
    }

    /// Cross-entropy of an already-normalized probability matrix.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let pv = self.value(probs);
        check_labels(pv, labels)?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv.get(i, y).max(CE_LOG_FLOOR).ln())
            .sum();
        let divisor = reduction.divisor(labels.len());
        let value = Matrix::from_parts(1, 1, pv.precision(), vec![pv.precision().round(total / divisor)]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                divisor,
            },
            &[probs],
        ))
    }

    /// Gradients of `loss` with respect to every trainable leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::contract("loss is not recorded on this tape"));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "loss must be a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.trainable {
                continue;
            }
            let (r, c) = node.value.shape();
            let data = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| vec![0.0; r * c]);
            out.grads
                .insert(Var { tape: self.id, index: i }, Matrix::from_parts(r, c, Precision::P64, data));
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, bv.as_slice(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.as_slice(), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ with a: m×k, b: n×k
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, bv.as_slice(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, av.as_slice(), &mut db, m, n, k);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let n = out.cols();
                    let mut db = vec![0.0; n];
                    for r in g.chunks(n) {
                        db.iter_mut().zip(r).for_each(|(d, x)| *d += x);
                    }
                    accumulate(grads, *row, db);
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).as_slice();
                let da = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut da = Vec::with_capacity(g.len());
                for (p, gy) in out.as_slice().chunks(n).zip(g.chunks(n)) {
                    let inner: f64 = p.iter().zip(gy).map(|(a, b)| a * b).sum();
                    da.extend(p.iter().zip(gy).map(|(pi, gi)| pi * (gi - inner)));
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).as_slice();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gy, xh), is) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let dxh: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        dx.extend(
                            dxh.iter()
                                .zip(xh)
                                .map(|(d, h)| is * (d - mean_dxh - h * mean_dxh_xh)),
                        );
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gy[j] * xh[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; n];
                    for gy in g.chunks(n) {
                        db.iter_mut().zip(gy).for_each(|(d, x)| *d += x);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (cols, len) = (xv.cols(), out.cols());
                let mut dx = vec![0.0; xv.len()];
                for (r, gy) in g.chunks(len).enumerate() {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(gy);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let dp = g
                            .chunks(total)
                            .flat_map(|r| r[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(grads, *p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        accumulate(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::GatherRows { src, index } => {
                let sv = self.value(*src);
                let cols = sv.cols();
                let mut ds = vec![0.0; sv.len()];
                for (gy, &i) in g.chunks(cols).zip(index) {
                    ds[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(d, x)| *d += x);
                }
                accumulate(grads, *src, ds);
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g[0];
                accumulate(grads, *a, self.value(*a).as_slice().iter().map(|x| s * x).collect());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                divisor,
            } => {
                let c = self.value(*logits).cols();
                let s = g[0] / divisor;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &y) in labels.iter().enumerate() {
                    if probs[i * c + y] > CE_LOG_FLOOR {
                        dl[i * c + y] -= s;
                    } else {
                        // Clamped region: the loss is constant in the logits.
                        dl[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::CrossEntropy { probs, labels, divisor } => {
                let pv = self.value(*probs);
                let mut dp = vec![0.0; pv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let p = pv.get(i, y);
                    if p > CE_LOG_FLOOR {
                        dp[i * pv.cols() + y] = -g[0] / (divisor * p);
                    }
                }
                accumulate(grads, *probs, dp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.index] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}

fn check_labels(m: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != m.rows() || labels.is_empty() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: m.shape(),
            right: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= m.cols()) {
        return Err(Error::contract(format!("label {bad} out of range for {} classes", m.cols())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn p64(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows, Precision::P64).unwrap()
    }

    #[test]
    fn squared_frobenius_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let m = tape.leaf(p64(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let loss = tape.sum_squares(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap(), &p64(&[&[2.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(p64(&[&[1.0]]));
        let unused = tape.leaf(p64(&[&[5.0, 6.0]]));
        let loss = tape.sum_squares(used);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Matrix::zeros(1, 2, Precision::P64));
    }

    #[test]
    fn reused_leaf_accumulates() {
        // loss = sum((x + x)^2) = 4 sum(x^2) -> grad 8x
        let mut tape = Tape::new();
        let x = tape.leaf(p64(&[&[1.0, -2.0]]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_squares(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &p64(&[&[8.0, -16.0]]));
    }

    #[test]
    fn constants_and_intermediates_are_not_returned() {
        let mut tape = Tape::new();
        let c = tape.constant(p64(&[&[2.0]]));
        let x = tape.leaf(p64(&[&[3.0]]));
        let y = tape.matmul(x, c).unwrap();
        let loss = tape.sum_squares(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.get(c).is_none());
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get(x).unwrap().get(0, 0), 2.0 * 6.0 * 2.0);
    }

    #[test]
    fn foreign_loss_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(p64(&[&[1.0]]));
        let loss = a.sum_squares(x);
        assert!(matches!(b.backward(loss), Err(Error::Contract(_))));
        assert!(a.backward(x).is_ok());
        let v = a.leaf(p64(&[&[1.0, 2.0]]));
        assert!(a.backward(v).is_err());
    }

    #[test]
    fn fused_and_composed_cross_entropy_agree() {
        let mut rng = Rng::new(3);
        let logits = Matrix::random_normal(4, 3, 1.0, &mut rng, Precision::P64);
        let labels = [0, 2, 1, 2];

        let mut t1 = Tape::new();
        let l1 = t1.leaf(logits.clone());
        let loss1 = t1.softmax_cross_entropy(l1, &labels, Reduction::Mean).unwrap();
        let g1 = t1.backward(loss1).unwrap();

        let mut t2 = Tape::new();
        let l2 = t2.leaf(logits);
        let p = t2.softmax_rows(l2);
        let loss2 = t2.cross_entropy(p, &labels, Reduction::Mean).unwrap();
        let g2 = t2.backward(loss2).unwrap();

        assert!((t1.scalar(loss1) - t2.scalar(loss2)).abs() < 1e-12);
        assert!(g1.get(l1).unwrap().max_abs_diff(g2.get(l2).unwrap()).unwrap() < 1e-12);
    }
}
