//! Dense row-major matrices, a reverse-mode tape over them and an Adam
//! optimizer. Everything the encoder, the mimicking model and the STS
//! trainer differentiate goes through [`Tape`].

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt shapes");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at shapes");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Vec<Var>),
    MseConst {
        pred: Var,
        target: Matrix,
    },
    Cosine(Var, Var),
    SquaredDiff {
        x: Var,
        target: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Matrix,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward pass. Leaves borrow their values,
/// so building a tape over model weights copies nothing.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    /// A trainable leaf.
    pub fn param(&mut self, m: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(m),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(m),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: &'a Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(m)
        } else {
            self.constant(m)
        }
    }

    pub fn owned_constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn owned_param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row bias must be a row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, bias.cols, "add_row width");
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&x| gelu(x)).collect());
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * g + b;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            softmax_in_place(v.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut v = Matrix::zeros(0, cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat width");
            v.data.extend_from_slice(&m.data);
            v.rows += m.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        let v = Matrix::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        let rg = self.rg(x);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    pub fn row(&mut self, x: Var, r: usize) -> Var {
        self.slice_rows(x, r, 1)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut v = Matrix::zeros(1, m.cols);
        for r in 0..m.rows {
            for (o, x) in v.data.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let n = m.rows as f64;
        v.data.iter_mut().for_each(|o| *o /= n);
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Sum(parts.to_vec()), rg)
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "mse shapes");
        let n = p.data.len() as f64;
        let loss = p.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::MseConst {
                pred,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Cosine similarity of two row vectors. A zero-norm input yields 0 with
    /// zero gradient; callers that care check for degeneracy first.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "cosine shapes");
        let denom = norm(&x.data) * norm(&y.data);
        let c = if denom > 0.0 { dot(&x.data, &y.data) / denom } else { 0.0 };
        let rg = self.rg(a) || self.rg(b);
        self.push(Matrix::from_vec(1, 1, vec![c]), Op::Cosine(a, b), rg)
    }

    /// `(x - target)²` for a `1 × 1` node.
    pub fn squared_diff(&mut self, x: Var, target: f64) -> Var {
        let d = self.scalar(x) - target;
        let rg = self.rg(x);
        self.push(Matrix::from_vec(1, 1, vec![d * d]), Op::SquaredDiff { x, target }, rg)
    }

    /// Mean negative log-likelihood of `(row, class)` targets under a row-wise
    /// softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let mut probs = self.value(logits).clone();
        for r in 0..probs.rows {
            softmax_in_place(probs.row_mut(r));
        }
        let loss = -targets
            .iter()
            .map(|&(r, c)| probs.get(r, c).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul_bt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scaled(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x.data.iter().zip(&g.data).map(|(&x, &g)| g * gelu_grad(x)).collect();
                self.acc(grads, *a, Matrix::from_vec(x.rows, x.cols, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gm = self.value(*gain);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.get(r, c) * xhat.get(r, c);
                            gb.data[c] += g.get(r, c);
                        }
                    }
                    self.acc(grads, *gain, gg);
                    self.acc(grads, *bias, gb);
                }
                if self.rg(*x) {
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gm.data[c]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(d, x)| d * x).sum::<f64>() / n;
                        for c in 0..cols {
                            gx.data[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(a) => {
                let mut gx = Matrix::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let s = dot(y, gy);
                    for ((o, y), gy) in gx.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *o = y * (gy - s);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *table, gt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.rg(p) {
                        let data = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                        self.acc(grads, p, Matrix::from_vec(rows, g.cols, data));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let m = self.value(*x);
                let mut gx = Matrix::zeros(m.rows, m.cols);
                gx.data[start * m.cols..(start + g.rows) * m.cols].copy_from_slice(&g.data);
                self.acc(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let m = self.value(*x);
                let n = m.rows as f64;
                let mut gx = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    for (o, x) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o = x / n;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.acc(grads, p, g.clone());
                }
            }
            Op::MseConst { pred, target } => {
                let p = self.value(*pred);
                let n = p.data.len() as f64;
                let s = g.data[0];
                let data = p.data.iter().zip(&target.data).map(|(a, b)| s * 2.0 * (a - b) / n).collect();
                self.acc(grads, *pred, Matrix::from_vec(p.rows, p.cols, data));
            }
            Op::Cosine(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (nx, ny) = (norm(&x.data), norm(&y.data));
                if nx == 0.0 || ny == 0.0 {
                    return;
                }
                let c = out.data[0];
                let s = g.data[0];
                let side = |u: &Matrix, v: &Matrix, nu: f64, nv: f64| {
                    let data = u
                        .data
                        .iter()
                        .zip(&v.data)
                        .map(|(ui, vi)| s * (vi / (nu * nv) - c * ui / (nu * nu)))
                        .collect();
                    Matrix::from_vec(u.rows, u.cols, data)
                };
                if self.rg(*a) {
                    self.acc(grads, *a, side(x, y, nx, ny));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, side(y, x, ny, nx));
                }
            }
            Op::SquaredDiff { x, target } => {
                let d = self.scalar(*x) - target;
                self.acc(grads, *x, Matrix::from_vec(1, 1, vec![2.0 * d * g.data[0]]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = g.data[0] / targets.len() as f64;
                let mut gx = Matrix::zeros(probs.rows, probs.cols);
                for &(r, c) in targets {
                    for (o, p) in gx.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o += s * p;
                    }
                    gx.data[r * probs.cols + c] -= s;
                }
                self.acc(grads, *logits, gx);
            }
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, applied before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adam over a fixed, ordered list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `grads[i]` belongs to `params[i]`; `None` means no gradient reached it.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Option<Matrix>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
            self.v = self.m.clone();
        }
        let mut clip = 1.0;
        if let Some(max) = self.config.max_grad_norm {
            let total: f64 = grads.iter().flatten().map(Matrix::sum_sq).sum::<f64>().sqrt();
            if total > max {
                clip = max / total;
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                m.data[j] = c.beta1 * m.data[j] + (1.0 - c.beta1) * gj;
                v.data[j] = c.beta2 * v.data[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= c.learning_rate * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
