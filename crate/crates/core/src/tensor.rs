//! Small dense-matrix autodiff used by the policy networks.
//!
//! Everything is `f64` and row-major. A [`Tape`] records a forward pass as a
//! list of nodes; [`Tape::backward`] walks it in reverse and returns the
//! gradient of a scalar loss with respect to every node.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn column(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, o: &Matrix, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), o.shape(), "zip shapes");
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, o: &Matrix) {
        assert_eq!(self.shape(), o.shape(), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
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

    pub fn matmul(&self, o: &Matrix) -> Matrix {
        assert_eq!(self.cols, o.rows, "matmul inner dims {}x{} * {}x{}", self.rows, self.cols, o.rows, o.cols);
        let mut out = Matrix::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * o.cols..(i + 1) * o.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &o.data[k * o.cols..(k + 1) * o.cols];
                for (x, &b) in orow.iter_mut().zip(brow) {
                    *x += a * b;
                }
            }
        }
        out
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, b: &Matrix) -> Matrix {
        assert_eq!((1, self.cols), b.shape(), "bias shape");
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, &y) in out.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        out
    }

    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn row_sums(&self) -> Matrix {
        Matrix::column(&(0..self.rows).map(|r| self.row(r).iter().sum()).collect::<Vec<_>>())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        out
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }
}

/// Row-wise log-softmax restricted to `mask`; masked entries are `-inf`.
pub fn masked_log_softmax(z: &Matrix, mask: &[bool]) -> Matrix {
    assert_eq!(mask.len(), z.data.len(), "mask shape");
    let mut out = Matrix::zeros(z.rows, z.cols);
    for r in 0..z.rows {
        let s = r * z.cols..(r + 1) * z.cols;
        let (zr, mr) = (&z.data[s.clone()], &mask[s.clone()]);
        let m = zr.iter().zip(mr).filter(|(_, &v)| v).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zr.iter().zip(mr).filter(|(_, &v)| v).map(|(&x, _)| (x - m).exp()).sum::<f64>().ln();
        for (o, (&x, &v)) in out.data[s].iter_mut().zip(zr.iter().zip(mr)) {
            *o = if v { x - lse } else { f64::NEG_INFINITY };
        }
    }
    out
}

/// Masked probabilities from masked log-probabilities (exact zeros off-mask).
pub fn probs_from_logp(logp: &Matrix) -> Matrix {
    logp.map(|l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
}

/// Entropy `-sum p ln p` over the valid entries of a masked distribution.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `min(rho*A, clip(rho, 1-eps, 1+eps)*A)`.
pub fn clipped_surrogate(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    MaskedEntropy(Var, Vec<bool>),
    Gather(Var, Vec<usize>),
    RowSum(Var),
    Col(Var, usize),
    ConcatCols(Vec<Var>),
    MulCol(Var, Var),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
    PpoClip(Var, Vec<f64>, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`; zero when the loss does not depend on it.
    pub fn of(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shapes[v.0].0, self.shapes[v.0].1),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Trainable input.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add_row(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::AddRow(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let v = self.value(a).zip(&c, |x, y| x * y);
        let g = self.g(a);
        self.push(v, Op::MulConst(a, c), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.g(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.g(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.g(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let g = self.g(a);
        self.push(v, Op::Exp(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.g(a);
        self.push(v, Op::Square(a), g)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let g = self.g(a);
        self.push(v, Op::Softmax(a), g)
    }

    pub fn masked_log_softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let v = masked_log_softmax(self.value(a), &mask);
        let g = self.g(a);
        self.push(v, Op::MaskedLogSoftmax(a, mask), g)
    }

    /// Per-row entropy of the masked softmax of `a`, shape `rows x 1`.
    pub fn masked_entropy(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let p = probs_from_logp(&masked_log_softmax(self.value(a), &mask));
        let h: Vec<f64> = (0..p.rows).map(|r| entropy(p.row(r))).collect();
        let g = self.g(a);
        self.push(Matrix::column(&h), Op::MaskedEntropy(a, mask), g)
    }

    /// Picks column `idx[r]` from every row, shape `rows x 1`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        assert_eq!(idx.len(), m.rows, "gather index count");
        let v = Matrix::column(&idx.iter().enumerate().map(|(r, &c)| m.get(r, c)).collect::<Vec<_>>());
        let g = self.g(a);
        self.push(v, Op::Gather(a, idx), g)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).row_sums();
        let g = self.g(a);
        self.push(v, Op::RowSum(a), g)
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        let m = self.value(a);
        let v = Matrix::column(&(0..m.rows).map(|r| m.get(r, j)).collect::<Vec<_>>());
        let g = self.g(a);
        self.push(v, Op::Col(a, j), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Scales row `r` of `a` by `c[r]` (`c` is `rows x 1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (m, cv) = (self.value(a), self.value(c));
        assert_eq!((m.rows, 1), cv.shape(), "mul_col shapes");
        let mut v = m.clone();
        for r in 0..m.rows {
            for x in &mut v.data[r * m.cols..(r + 1) * m.cols] {
                *x *= cv.data[r];
            }
        }
        let g = self.g(a) || self.g(c);
        self.push(v, Op::MulCol(a, c), g)
    }

    /// Repeats a `1 x cols` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows, 1, "broadcast needs a single row");
        let mut data = Vec::with_capacity(rows * m.cols);
        for _ in 0..rows {
            data.extend_from_slice(&m.data);
        }
        let v = Matrix::from_vec(rows, m.cols, data);
        let g = self.g(a);
        self.push(v, Op::BroadcastRows(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let g = self.g(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.data.len() as f64);
        let g = self.g(a);
        self.push(v, Op::Mean(a), g)
    }

    /// Elementwise clipped surrogate of ratios `rho` (`rows x 1`) against
    /// fixed advantages.
    pub fn ppo_clip(&mut self, rho: Var, adv: Vec<f64>, eps: f64) -> Var {
        let r = self.value(rho);
        assert_eq!((adv.len(), 1), r.shape(), "ppo_clip shapes");
        let v = Matrix::column(&r.data.iter().zip(&adv).map(|(&x, &a)| clipped_surrogate(x, a, eps)).collect::<Vec<_>>());
        let g = self.g(rho);
        self.push(v, Op::PpoClip(rho, adv, eps), g)
    }

    /// Mean squared error between two same-shaped variables.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(x) => x.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.g(*a) {
                    self.acc(grads, *a, g.matmul(&self.value(*b).transpose()));
                }
                if self.g(*b) {
                    self.acc(grads, *b, self.value(*a).transpose().matmul(g));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.col_sums());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip(self.value(*b), |x, y| x * y));
                self.acc(grads, *b, g.zip(self.value(*a), |x, y| x * y));
            }
            Op::MulConst(a, c) => self.acc(grads, *a, g.zip(c, |x, y| x * y)),
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::Tanh(a) => self.acc(grads, *a, g.zip(y, |x, t| x * (1.0 - t * t))),
            Op::Relu(a) => self.acc(grads, *a, g.zip(self.value(*a), |x, u| if u > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => self.acc(grads, *a, g.zip(y, |x, e| x * e)),
            Op::Square(a) => self.acc(grads, *a, g.zip(self.value(*a), |x, u| 2.0 * u * x)),
            Op::Softmax(a) => {
                let mut out = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let p = probs_from_logp(y);
                let mut out = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let s: f64 = (0..y.cols).filter(|&c| mask[r * y.cols + c]).map(|c| g.get(r, c)).sum();
                    for c in 0..y.cols {
                        if mask[r * y.cols + c] {
                            out.set(r, c, g.get(r, c) - p.get(r, c) * s);
                        }
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::MaskedEntropy(a, mask) => {
                let logp = masked_log_softmax(self.value(*a), mask);
                let mut out = Matrix::zeros(logp.rows, logp.cols);
                for r in 0..logp.rows {
                    let h = y.data[r];
                    for c in 0..logp.cols {
                        if mask[r * logp.cols + c] {
                            let l = logp.get(r, c);
                            out.set(r, c, -g.data[r] * l.exp() * (l + h));
                        }
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Gather(a, idx) => {
                let m = self.value(*a);
                let mut out = Matrix::zeros(m.rows, m.cols);
                for (r, &c) in idx.iter().enumerate() {
                    out.set(r, c, g.data[r]);
                }
                self.acc(grads, *a, out);
            }
            Op::RowSum(a) => {
                let m = self.value(*a);
                let mut out = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    for c in 0..m.cols {
                        out.set(r, c, g.data[r]);
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Col(a, j) => {
                let m = self.value(*a);
                let mut out = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    out.set(r, *j, g.data[r]);
                }
                self.acc(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let m = self.value(p);
                    let mut out = Matrix::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        out.data[r * m.cols..(r + 1) * m.cols]
                            .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + m.cols]);
                    }
                    off += m.cols;
                    self.acc(grads, p, out);
                }
            }
            Op::MulCol(a, c) => {
                let (m, cv) = (self.value(*a), self.value(*c));
                if self.g(*a) {
                    let mut out = g.clone();
                    for r in 0..m.rows {
                        for x in &mut out.data[r * m.cols..(r + 1) * m.cols] {
                            *x *= cv.data[r];
                        }
                    }
                    self.acc(grads, *a, out);
                }
                if self.g(*c) {
                    let col: Vec<f64> = (0..m.rows).map(|r| g.row(r).iter().zip(m.row(r)).map(|(x, y)| x * y).sum()).collect();
                    self.acc(grads, *c, Matrix::column(&col));
                }
            }
            Op::BroadcastRows(a) => self.acc(grads, *a, g.col_sums()),
            Op::Sum(a) => {
                let m = self.value(*a);
                self.acc(grads, *a, Matrix::filled(m.rows, m.cols, g.item()));
            }
            Op::Mean(a) => {
                let m = self.value(*a);
                self.acc(grads, *a, Matrix::filled(m.rows, m.cols, g.item() / m.data.len() as f64));
            }
            Op::PpoClip(rho, adv, eps) => {
                let r = self.value(*rho);
                let out: Vec<f64> = r
                    .data
                    .iter()
                    .zip(adv)
                    .zip(&g.data)
                    .map(|((&x, &a), &gr)| {
                        let clipped = x.clamp(1.0 - eps, 1.0 + eps);
                        // gradient flows only through the unclipped branch when it is the minimum
                        if x * a <= clipped * a {
                            gr * a
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(grads, *rho, Matrix::column(&out));
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply_tape(self, t: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Tanh => t.tanh(v),
            Activation::Relu => t.relu(v),
        }
    }

    fn apply(self, m: Matrix) -> Matrix {
        match self {
            Activation::Identity => m,
            Activation::Tanh => m.map(f64::tanh),
            Activation::Relu => m.map(|x| x.max(0.0)),
        }
    }
}

/// Named parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: Vec<NamedArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, m: Matrix) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(m);
        self.index.insert(name.to_string(), self.values.len() - 1);
        self.values.len() - 1
    }

    /// Xavier-uniform weight matrix.
    pub fn insert_xavier<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
        self.insert(name, Matrix::from_vec(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.values[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = self.id(name);
        &mut self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Leaves for every parameter, in insertion order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|m| tape.param(m.clone())).collect()
    }

    /// Leaves that carry values but no gradient.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|m| tape.constant(m.clone())).collect()
    }

    pub fn collect(&self, vars: &[Var], grads: &Gradients) -> Vec<Matrix> {
        vars.iter().map(|&v| grads.of(v)).collect()
    }

    pub fn to_json(&self) -> Result<String, TensorError> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, m)| NamedArray { name: n.clone(), rows: m.rows, cols: m.cols, data: m.data.clone() })
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TensorError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut p = ParamSet::new();
        for a in ck.params {
            if a.data.len() != a.rows * a.cols {
                return Err(TensorError::Checkpoint(format!("{} has wrong element count", a.name)));
            }
            p.insert(&a.name, Matrix::from_vec(a.rows, a.cols, a.data));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copies values of matching names and shapes from `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), TensorError> {
        for (i, n) in self.names.iter().enumerate() {
            let src = other.index.get(n).ok_or_else(|| TensorError::Checkpoint(format!("missing {n}")))?;
            let m = &other.values[*src];
            if m.shape() != self.values[i].shape() {
                return Err(TensorError::Shape(format!("{n}: {:?} vs {:?}", m.shape(), self.values[i].shape())));
            }
            self.values[i] = m.clone();
        }
        Ok(())
    }
}

/// Multi-layer perceptron whose weights live in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl DenseNet {
    pub fn new(prefix: &str, sizes: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        Self { prefix: prefix.to_string(), sizes: sizes.to_vec(), activations: activations.to_vec() }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("non-empty net")
    }

    fn w(&self, l: usize) -> String {
        format!("{}.w{l}", self.prefix)
    }

    fn b(&self, l: usize) -> String {
        format!("{}.b{l}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        for l in 0..self.activations.len() {
            params.insert_xavier(&self.w(l), self.sizes[l], self.sizes[l + 1], rng);
            params.insert(&self.b(l), Matrix::zeros(1, self.sizes[l + 1]));
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix, TensorError> {
        if x.cols != self.input() {
            return Err(TensorError::Shape(format!("{}: input width {} != {}", self.prefix, x.cols, self.input())));
        }
        let mut h = x.clone();
        for (l, act) in self.activations.iter().enumerate() {
            h = act.apply(h.matmul(params.get(&self.w(l))).add_row(params.get(&self.b(l))));
        }
        Ok(h)
    }

    /// Forward on a tape; `vars` are the bound leaves of `params`.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamSet, vars: &[Var], x: Var) -> Var {
        let mut h = x;
        for (l, act) in self.activations.iter().enumerate() {
            let w = vars[params.id(&self.w(l))];
            let b = vars[params.id(&self.b(l))];
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = act.apply_tape(tape, z);
        }
        h
    }
}

/// Query/key/value projections for single-query attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub prefix: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub d_k: usize,
    pub dropout: f64,
}

impl Attention {
    pub fn new(prefix: &str, query_dim: usize, key_dim: usize, d_k: usize, dropout: f64) -> Result<Self, TensorError> {
        if d_k == 0 {
            return Err(TensorError::Config("attention key dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(TensorError::Config("dropout must lie in [0,1)".into()));
        }
        Ok(Self { prefix: prefix.to_string(), query_dim, key_dim, d_k, dropout })
    }

    pub fn names(&self) -> [String; 3] {
        [format!("{}.wq", self.prefix), format!("{}.wk", self.prefix), format!("{}.wv", self.prefix)]
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let [q, k, v] = self.names();
        params.insert_xavier(&q, self.query_dim, self.d_k, rng);
        params.insert_xavier(&k, self.key_dim, self.d_k, rng);
        // values are added back onto the query features
        params.insert_xavier(&v, self.key_dim, self.query_dim, rng);
    }

    /// `alpha = softmax(Q K^T / sqrt(d_k))`, `h = alpha V + h_env` for each
    /// row of `h_env` against its own keys: `keys[k]` is `rows x key_dim`.
    /// `drop` multiplies the attention weights (already scaled by `1/(1-p)`).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        h_env: Var,
        keys: &[Var],
        drop: Option<Matrix>,
    ) -> (Var, Var) {
        let [qn, kn, vn] = self.names();
        let (wq, wk, wv) = (vars[params.id(&qn)], vars[params.id(&kn)], vars[params.id(&vn)]);
        let q = tape.matmul(h_env, wq);
        let mut scores = Vec::with_capacity(keys.len());
        let mut values = Vec::with_capacity(keys.len());
        for &k in keys {
            let kk = tape.matmul(k, wk);
            let qk = tape.mul(q, kk);
            let s = tape.row_sum(qk);
            scores.push(tape.scale(s, 1.0 / (self.d_k as f64).sqrt()));
            values.push(tape.matmul(k, wv));
        }
        let s = tape.concat_cols(&scores);
        let alpha = tape.softmax(s);
        let weights = match drop {
            Some(m) => tape.mul_const(alpha, m),
            None => alpha,
        };
        let mut h = h_env;
        for (j, &v) in values.iter().enumerate() {
            let a = tape.col(weights, j);
            let av = tape.mul_col(v, a);
            h = tape.add(h, av);
        }
        (alpha, h)
    }

    /// Dropout mask for `rows x keys` weights.
    pub fn dropout_mask<R: Rng + ?Sized>(&self, rows: usize, keys: usize, rng: &mut R) -> Matrix {
        let keep = 1.0 - self.dropout;
        let data = (0..rows * keys).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        Matrix::from_vec(rows, keys, data)
    }
}

/// Single-query attention without a tape: returns `(alpha, h)`.
pub fn attention(att: &Attention, params: &ParamSet, h_env: &[f64], keys: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let vars = params.bind_frozen(&mut t);
    let h = t.constant(Matrix::row_vector(h_env));
    let ks: Vec<Var> = (0..keys.rows).map(|r| t.constant(Matrix::row_vector(keys.row(r)))).collect();
    let (a, out) = att.forward_tape(&mut t, params, &vars, h, &ks, None);
    (t.value(a).data.clone(), t.value(out).data.clone())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params.values().iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params.values_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }
    norm
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference(params: &ParamSet, h: f64, mut f: impl FnMut(&ParamSet) -> f64) -> Vec<Matrix> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let mut g = Matrix::zeros(p.values()[i].rows, p.values()[i].cols);
        for j in 0..g.data.len() {
            let x = p.values()[i].data[j];
            p.values_mut()[i].data[j] = x + h;
            let up = f(&p);
            p.values_mut()[i].data[j] = x - h;
            let down = f(&p);
            p.values_mut()[i].data[j] = x;
            g.data[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest `|a-b| / max(|a|,|b|,floor)` across all entries.
pub fn max_rel_error(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data.iter().zip(&y.data))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
