//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; constants are owned by
//! the tape. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every parameter that was used
//! and marked trainable.
//!
//! Non-differentiable intermediate quantities (binarized masks, IoU targets)
//! go through [`Graph::pin`]. In replay mode the tape substitutes the values
//! recorded on an earlier pass, which keeps those quantities fixed while a
//! finite-difference check perturbs the parameters.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Abs(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix, count: usize },
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

enum PinMode {
    Off,
    Record(Vec<Matrix>),
    Replay { values: Vec<Matrix>, next: usize },
}

/// Gradients of a scalar with respect to parameters.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: HashMap<ParamId, Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Accumulates `other` into `self`.
    pub fn accumulate(&mut self, other: &Grads) {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Matrix::all_finite)
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    pins: PinMode,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            trainable: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            pins: PinMode::Off,
        }
    }

    /// Parameters whose flag is `false` are treated as constants: no
    /// gradient is computed for them or for subgraphs depending only on them.
    pub fn with_trainable(mut self, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), self.params.len());
        self.trainable = Some(trainable);
        self
    }

    pub fn recording_pins(mut self) -> Self {
        self.pins = PinMode::Record(Vec::new());
        self
    }

    pub fn replaying_pins(mut self, values: Vec<Matrix>) -> Self {
        self.pins = PinMode::Replay { values, next: 0 };
        self
    }

    /// Values recorded by [`Graph::pin`] when in recording mode.
    pub fn take_pins(&mut self) -> Vec<Matrix> {
        match std::mem::replace(&mut self.pins, PinMode::Off) {
            PinMode::Record(v) => v,
            PinMode::Replay { values, .. } => values,
            PinMode::Off => Vec::new(),
        }
    }

    /// Passes a detached value through the pin log.
    pub fn pin(&mut self, value: Matrix) -> Matrix {
        match &mut self.pins {
            PinMode::Off => value,
            PinMode::Record(log) => {
                log.push(value.clone());
                value
            }
            PinMode::Replay { values, next } => {
                let v = values
                    .get(*next)
                    .cloned()
                    .expect("pin replay log exhausted; forward pass is not deterministic");
                assert_eq!(v.shape(), value.shape(), "pinned value changed shape");
                *next += 1;
                v
            }
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.get(0, 0)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = self.trainable.map(|t| t[id.0]).unwrap_or(true);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Adds the `1 × cols` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ar, ac) = self.shape(a);
        assert_eq!(self.shape(row), (1, ac), "add_row expects a 1x{ac} row");
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..ar {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Elementwise power; inputs must be positive.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::Powf(a, p), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.shape(gamma), (1, cols));
        assert_eq!(self.shape(beta), (1, cols));
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols row mismatch");
                self.shape(p).1
            })
            .sum();
        let mut out = Matrix::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "column slice out of range");
        let out = Matrix::from_fn(src.rows(), len, |r, c| src.get(r, start + c));
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(src.row(i));
        }
        let out = Matrix::from_vec(index.len(), cols, data);
        self.push(out, Op::GatherRows { a, index }, &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean softmax cross-entropy over rows with a target; rows with `None`
    /// are ignored. Returns zero when no row has a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            if let Some(t) = *t {
                total -= row[t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let out = Matrix::scalar(if count > 0 { total / count as f64 } else { 0.0 });
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut out = Grads::default();

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.map.insert(*id, dy);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.needs(a) {
                        // d op(A) = dY · op(B)^T, stored transposed if `ta`.
                        let g = if ta {
                            matmul(self.value(b), tb, &dy, true)
                        } else {
                            matmul(&dy, false, self.value(b), !tb)
                        };
                        accumulate(&mut grads, a, g);
                    }
                    if self.needs(b) {
                        let g = if tb {
                            matmul(&dy, true, self.value(a), ta)
                        } else {
                            matmul(self.value(a), !ta, &dy, false)
                        };
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.map(|v| -v));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let mut g = Matrix::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for (acc, v) in g.row_mut(0).iter_mut().zip(dy.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *row, g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.zip_map(self.value(*b), |g, y| g * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy.zip_map(self.value(*a), |g, x| g * x));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, dy),
                Op::Gelu(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| g * gelu_grad(x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let g = dy.zip_map(y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, g);
                }
                Op::LogSigmoid(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| g * sigmoid(-x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Abs(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let g = dy.zip_map(self.value(*a), |g, x| g * p * x.powf(p - 1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dr = dy.row(r);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (o, (yv, dv)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                            *o = yv * (dv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = xhat.shape();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg.data_mut()[c] += dy.get(r, c) * xhat.get(r, c);
                                db.data_mut()[c] += dy.get(r, c);
                            }
                        }
                        if self.needs(*gamma) {
                            accumulate(&mut grads, *gamma, dg);
                        }
                        if self.needs(*beta) {
                            accumulate(&mut grads, *beta, db);
                        }
                    }
                    if self.needs(*x) {
                        let g = self.value(*gamma).data();
                        let mut dx = Matrix::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                let d = dy.get(r, c) * g[c];
                                mean_d += d;
                                mean_dx += d * xhat.get(r, c);
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for c in 0..cols {
                                let d = dy.get(r, c) * g[c];
                                dx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs(p) {
                            let g = Matrix::from_fn(dy.rows(), w, |r, c| dy.get(r, off + c));
                            accumulate(&mut grads, p, g);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.needs(p) {
                            accumulate(&mut grads, p, dy.slice_rows(off, h));
                        }
                        off += h;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    g.data_mut()[start * cols..start * cols + dy.len()].copy_from_slice(dy.data());
                    accumulate(&mut grads, *a, g);
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        g.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::GatherRows { a, index } => {
                    let (rows, cols) = self.shape(*a);
                    let mut g = Matrix::zeros(rows, cols);
                    for (r, &src) in index.iter().enumerate() {
                        for (acc, v) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, dy.reshaped(rows, cols));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, dy.transpose()),
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(rows, cols, dy.get(0, 0)));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count > 0 {
                        let scale = dy.get(0, 0) / *count as f64;
                        let mut g = Matrix::zeros(probs.rows(), probs.cols());
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                for (o, p) in g.row_mut(r).iter_mut().zip(probs.row(r)) {
                                    *o = p * scale;
                                }
                                g.row_mut(r)[t] -= scale;
                            }
                        }
                        accumulate(&mut grads, *logits, g);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
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

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Block, Init};

    /// Central differences of `f` along a random direction in every
    /// parameter, compared with the tape's gradient.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let grads = g.backward(root);
        let mut init = Init::new(99);
        for id in store.ids() {
            let shape = store.value(id).shape();
            let dir = init.normal(shape.0, shape.1, 1.0);
            let analytic = grads.get(id).map(|m| m.dot(&dir)).unwrap_or(0.0);
            let h = 1e-6;
            let eval = |sign: f64| {
                let mut s = store.clone();
                let v = s.value_mut(id);
                for (x, d) in v.data_mut().iter_mut().zip(dir.data()) {
                    *x += sign * h * d;
                }
                let mut g = Graph::new(&s);
                let r = f(&mut g);
                g.scalar(r)
            };
            let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-6,
                "{}: analytic {analytic} numeric {numeric}",
                store.entry(id).name
            );
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut init = Init::new(3);
        let mut s = ParamStore::new();
        for &(n, r, c) in shapes {
            s.insert(n, Block::Llm, init.normal(r, c, 0.7));
        }
        s
    }

    #[test]
    fn matmul_chain_with_transposes() {
        let s = store_with(&[("a", 3, 4), ("b", 5, 4), ("c", 3, 5)]);
        let (a, b, c) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("c").unwrap());
        check(&s, |g| {
            let (a, b, c) = (g.param(a), g.param(b), g.param(c));
            let ab = g.matmul_t(a, false, b, true); // 3x5
            let x = g.mul(ab, c);
            let t = g.matmul_t(x, true, a, false); // 5x4
            let y = g.gelu(t);
            g.sum(y)
        });
    }

    #[test]
    fn layer_norm_softmax_and_cross_entropy() {
        let s = store_with(&[("x", 4, 6), ("gam", 1, 6), ("bet", 1, 6), ("w", 6, 5)]);
        let ids: Vec<_> = ["x", "gam", "bet", "w"].iter().map(|n| s.id(n).unwrap()).collect();
        check(&s, |g| {
            let x = g.param(ids[0]);
            let gam = g.param(ids[1]);
            let bet = g.param(ids[2]);
            let w = g.param(ids[3]);
            let h = g.layer_norm(x, gam, bet);
            let l = g.matmul(h, w);
            let p = g.softmax_rows(l);
            let q = g.add(p, l);
            g.cross_entropy(q, vec![Some(1), None, Some(4), Some(0)])
        });
    }

    #[test]
    fn structural_ops() {
        let s = store_with(&[("a", 4, 3), ("b", 2, 3), ("r", 1, 3)]);
        let ids: Vec<_> = ["a", "b", "r"].iter().map(|n| s.id(n).unwrap()).collect();
        check(&s, |g| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let r = g.param(ids[2]);
            let cat = g.concat_rows(&[a, b]); // 6x3
            let added = g.add_row(cat, r);
            let sl = g.slice_rows(added, 1, 4);
            let gathered = g.gather_rows(sl, vec![0, 0, 3, 2]);
            let cc = g.concat_cols(&[gathered, a]); // 4x6
            let sc = g.slice_cols(cc, 2, 3);
            let rs = g.reshape(sc, 2, 6);
            let tr = g.transpose(rs);
            let sg = g.sigmoid(tr);
            let ls = g.log_sigmoid(tr);
            let pw = g.powf(sg, 2.0);
            let m = g.mul(pw, ls);
            let d = g.sub(m, tr);
            let ab = g.abs(d);
            let sc = g.scale(ab, 0.3);
            let sh = g.add_scalar(sc, 1.0);
            g.mean(sh)
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let s = store_with(&[("a", 2, 2), ("b", 2, 2)]);
        let flags = [false, true];
        let mut g = Graph::new(&s).with_trainable(&flags);
        let a = g.param(s.id("a").unwrap());
        let b = g.param(s.id("b").unwrap());
        let p = g.matmul(a, b);
        let root = g.sum(p);
        let grads = g.backward(root);
        assert!(grads.get(s.id("a").unwrap()).is_none());
        assert!(grads.get(s.id("b").unwrap()).is_some());
    }

    #[test]
    fn pins_replay_recorded_values() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s).recording_pins();
        let v = g.pin(Matrix::scalar(1.0));
        assert_eq!(v.get(0, 0), 1.0);
        let log = g.take_pins();
        let mut g = Graph::new(&s).replaying_pins(log);
        assert_eq!(g.pin(Matrix::scalar(5.0)).get(0, 0), 1.0);
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((sigmoid(-40.0) - (-40.0f64).exp() / (1.0 + (-40.0f64).exp())).abs() < 1e-30);
    }
}
