//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created earlier, so creation order is a topological order and the backward
//! pass simply walks the tape in reverse. Graphs are rebuilt for every
//! training step (define-by-run); parameters are moved in with
//! [`Graph::param`] and moved back out with [`Graph::take_param`].
//!
//! Every log argument and every denominator is clamped below at [`EPS`].
//! Denominators in this crate (softmax sums, norms, membership masses) are
//! nonnegative, so clamping is the only guard needed.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Singularity guard for logs and denominators.
pub const EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    /// `ln(e^a + e^b)`, evaluated without overflow.
    LogAddExp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    RowSum,
    RowSoftmax,
    RowL2Normalize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Reduce(Reduce, Var),
    StopGradient(Var),
    SqDist(Var, Var),
    PairwiseLse {
        input: Var,
        inv_tau: f64,
        /// `exp(s_ij − max_i)` from the forward pass (zero diagonal).
        exps: Matrix,
        /// Row sums of `exps`.
        totals: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Reduce(..) => "reduce",
            Op::StopGradient(_) => "stop_gradient",
            Op::SqDist(..) => "sq_dist",
            Op::PairwiseLse { .. } => "pairwise_lse",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    /// Allocated by `backward` for nodes that require gradients; always the
    /// shape of `value` when present.
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
    grad_blocked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
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

    /// Trainable leaves, in insertion order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) | Op::SqDist(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a) | Op::Unary(_, a) | Op::Scale(a, _) | Op::Reduce(_, a) | Op::StopGradient(a) => vec![*a],
            Op::PairwiseLse { input, .. } => vec![*input],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_grad_blocked(&self, v: Var) -> bool {
        self.nodes[v.0].grad_blocked
    }

    /// Gradient of the last backward pass; zeros for nodes the loss does not
    /// reach or that do not require gradients.
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.shape(v)),
        }
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), x))
    }

    /// Moves a parameter's value and gradient out of the graph, leaving an
    /// empty placeholder behind. Use after `backward` to hand values back to
    /// the owner without copying.
    pub fn take_param(&mut self, v: Var) -> (Matrix, Matrix) {
        let node = &mut self.nodes[v.0];
        let value = std::mem::take(&mut node.value);
        let grad = node.grad.take().unwrap_or_else(|| Matrix::zeros(value.dim()));
        (value, grad)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            grad_blocked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let value = match kind {
            Unary::Exp => x.mapv(f64::exp),
            Unary::Log => x.mapv(|v| v.max(EPS).ln()),
            Unary::Tanh => x.mapv(f64::tanh),
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Relu => x.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Square => x.mapv(|v| v * v),
            Unary::Neg => x.mapv(|v| -v),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("elementwise", sa, sb));
        }
        let (x, y) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => Zip::from(x).and(y).map_collect(|&p, &q| p / q.max(EPS)),
            Binary::LogAddExp => Zip::from(x).and(y).map_collect(|&p, &q| log_add_exp(p, q)),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::LogAddExp, a, b)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + 1·row`, adding a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::shape("add_row", sa, sr));
        }
        let value = self.value(a) + self.value(row);
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Domain(format!(
                "reduction {kind:?} over empty {:?} input",
                x.dim()
            )));
        }
        let value = match kind {
            Reduce::Sum => Matrix::from_elem((1, 1), x.sum()),
            Reduce::Mean => Matrix::from_elem((1, 1), x.sum() / x.len() as f64),
            Reduce::RowSum => x.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Reduce::RowSoftmax => row_softmax(x),
            Reduce::RowL2Normalize => row_l2_normalize(x),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reduce(kind, a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, a)
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a)
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::RowSum, a)
    }
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::RowSoftmax, a)
    }
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::RowL2Normalize, a)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        let v = self.push(value, Op::StopGradient(a), false);
        self.nodes[v.0].grad_blocked = true;
        v
    }

    /// Pairwise squared Euclidean distances between the rows of `z` (n×d)
    /// and `centers` (k×d), giving n×k.
    pub fn sq_dist(&mut self, z: Var, centers: Var) -> Result<Var> {
        let (sz, sc) = (self.shape(z), self.shape(centers));
        if sz.1 != sc.1 {
            return Err(Error::shape("sq_dist", sz, sc));
        }
        let value = pairwise_sq_dist(self.value(z), self.value(centers));
        let rg = self.any_grad(&[z, centers]);
        Ok(self.push(value, Op::SqDist(z, centers), rg))
    }

    /// For the rows `h_i` of `h` (n×d), the n×1 column
    /// `l_i = ln Σ_{j≠i} w_ij · exp(h_i·h_j / τ)`.
    ///
    /// `log_weights`, when given, is a constant symmetric n×n matrix of
    /// `ln w_ij`; otherwise every `w_ij = 1`. Only the n×n matrix of
    /// normalized pair terms is kept for backward.
    pub fn pairwise_lse(&mut self, h: Var, tau: f64, log_weights: Option<Arc<Matrix>>) -> Result<Var> {
        let (n, d) = self.shape(h);
        if n < 2 {
            return Err(Error::Domain(format!("pairwise_lse needs at least two rows, got {n}")));
        }
        if let Some(w) = &log_weights {
            if w.dim() != (n, n) {
                return Err(Error::shape("pairwise_lse", (n, d), w.dim()));
            }
        }
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        let inv_tau = 1.0 / tau;
        let x = self.value(h);
        let mut exps = x.dot(&x.t());
        let mut lse = Matrix::zeros((n, 1));
        let mut totals = Vec::with_capacity(n);
        for (i, mut row) in exps.outer_iter_mut().enumerate() {
            let row = row.as_slice_mut().expect("fresh matrices are contiguous");
            match &log_weights {
                Some(w) => {
                    let w = w.row(i);
                    for (s, &lw) in row.iter_mut().zip(w.iter()) {
                        *s = *s * inv_tau + lw;
                    }
                }
                None => row.iter_mut().for_each(|s| *s *= inv_tau),
            }
            row[i] = f64::NEG_INFINITY;
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            lse[[i, 0]] = max + total.ln();
            totals.push(total);
        }
        let rg = self.any_grad(&[h]);
        Ok(self.push(
            lse,
            Op::PairwiseLse {
                input: h,
                inv_tau,
                exps,
                totals,
            },
            rg,
        ))
    }

    /// Runs the backward pass from a 1×1 `loss`. Gradients from earlier
    /// passes are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {shape:?}")));
        }
        for node in &mut self.nodes {
            node.grad = node.requires_grad.then(|| Matrix::zeros(node.value.dim()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[[0, 0]] = 1.0;
        }
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Matrix) {
        let node = &mut self.nodes[v.0];
        if let Some(g) = node.grad.as_mut() {
            *g += &contribution;
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let da = g.dot(&self.value(*b).t());
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let db = self.value(*a).t().dot(g);
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    self.accumulate(*a, g.t().to_owned());
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    self.accumulate(*a, g * *c);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    self.accumulate(*a, g.clone());
                }
                if self.wants(*row) {
                    self.accumulate(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Unary(kind, a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let y = &self.nodes[idx].value;
                    let d = match kind {
                        Unary::Exp => g * y,
                        Unary::Log => Zip::from(g)
                            .and(x)
                            .map_collect(|&gi, &xi| if xi > EPS { gi / xi } else { 0.0 }),
                        Unary::Tanh => Zip::from(g).and(y).map_collect(|&gi, &yi| gi * (1.0 - yi * yi)),
                        Unary::Sigmoid => Zip::from(g).and(y).map_collect(|&gi, &yi| gi * yi * (1.0 - yi)),
                        Unary::Relu => Zip::from(g)
                            .and(x)
                            .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 }),
                        Unary::Square => Zip::from(g).and(x).map_collect(|&gi, &xi| 2.0 * xi * gi),
                        Unary::Neg => g.mapv(|gi| -gi),
                    };
                    self.accumulate(*a, d);
                }
            }
            Op::Binary(kind, a, b) => {
                let (wa, wb) = (self.wants(*a), self.wants(*b));
                let (x, y) = (self.value(*a), self.value(*b));
                let (da, db) = match kind {
                    Binary::Add => (wa.then(|| g.clone()), wb.then(|| g.clone())),
                    Binary::Sub => (wa.then(|| g.clone()), wb.then(|| g.mapv(|v| -v))),
                    Binary::Mul => (wa.then(|| g * y), wb.then(|| g * x)),
                    Binary::Div => (
                        wa.then(|| Zip::from(g).and(y).map_collect(|&gi, &q| gi / q.max(EPS))),
                        wb.then(|| {
                            Zip::from(g).and(x).and(y).map_collect(
                                |&gi, &p, &q| {
                                    if q > EPS {
                                        -gi * p / (q * q)
                                    } else {
                                        0.0
                                    }
                                },
                            )
                        }),
                    ),
                    Binary::LogAddExp => (
                        wa.then(|| {
                            Zip::from(g)
                                .and(x)
                                .and(y)
                                .map_collect(|&gi, &p, &q| gi * sigmoid(p - q))
                        }),
                        wb.then(|| {
                            Zip::from(g)
                                .and(x)
                                .and(y)
                                .map_collect(|&gi, &p, &q| gi * sigmoid(q - p))
                        }),
                    ),
                };
                if let Some(da) = da {
                    self.accumulate(*a, da);
                }
                if let Some(db) = db {
                    self.accumulate(*b, db);
                }
            }
            Op::Reduce(kind, a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let y = &self.nodes[idx].value;
                    let d = match kind {
                        Reduce::Sum => Matrix::from_elem(x.dim(), g[[0, 0]]),
                        Reduce::Mean => Matrix::from_elem(x.dim(), g[[0, 0]] / x.len() as f64),
                        Reduce::RowSum => {
                            let mut d = Matrix::zeros(x.dim());
                            for (mut row, gi) in d.outer_iter_mut().zip(g.column(0)) {
                                row.fill(*gi);
                            }
                            d
                        }
                        Reduce::RowSoftmax => {
                            let mut d = g * y;
                            for (mut drow, yrow) in d.outer_iter_mut().zip(y.outer_iter()) {
                                let dot = drow.sum();
                                Zip::from(&mut drow).and(&yrow).for_each(|di, &yi| *di -= yi * dot);
                            }
                            d
                        }
                        Reduce::RowL2Normalize => {
                            let mut d = g.clone();
                            for ((mut drow, yrow), xrow) in d.outer_iter_mut().zip(y.outer_iter()).zip(x.outer_iter()) {
                                let norm = xrow.dot(&xrow).sqrt();
                                if norm >= EPS {
                                    let gy = drow.dot(&yrow);
                                    Zip::from(&mut drow)
                                        .and(&yrow)
                                        .for_each(|di, &yi| *di = (*di - yi * gy) / norm);
                                } else {
                                    drow.mapv_inplace(|di| di / EPS);
                                }
                            }
                            d
                        }
                    };
                    self.accumulate(*a, d);
                }
            }
            Op::SqDist(z, c) => {
                let (wz, wc) = (self.wants(*z), self.wants(*c));
                let (zv, cv) = (self.value(*z), self.value(*c));
                let dz = wz.then(|| {
                    // 2 (rowsum(g) ∘ z − g c)
                    let mut dz = g.dot(cv) * -2.0;
                    for ((mut row, zrow), gs) in dz.outer_iter_mut().zip(zv.outer_iter()).zip(g.sum_axis(Axis(1))) {
                        row.scaled_add(2.0 * gs, &zrow);
                    }
                    dz
                });
                let dc = wc.then(|| {
                    // 2 (colsum(g) ∘ c − gᵀ z)
                    let mut dc = g.t().dot(zv) * -2.0;
                    for ((mut row, crow), gs) in dc.outer_iter_mut().zip(cv.outer_iter()).zip(g.sum_axis(Axis(0))) {
                        row.scaled_add(2.0 * gs, &crow);
                    }
                    dc
                });
                if let Some(dz) = dz {
                    self.accumulate(*z, dz);
                }
                if let Some(dc) = dc {
                    self.accumulate(*c, dc);
                }
            }
            Op::PairwiseLse {
                input,
                inv_tau,
                exps,
                totals,
            } => {
                if self.wants(*input) {
                    // With π_ij = e_ij / t_i and M_ij = g_i π_ij, s_ij = h_i·h_j / τ
                    // gives dh = (M + Mᵀ) h / τ = [u ⊙ (E h) + Eᵀ (u ⊙ h)] / τ
                    // where u_i = g_i / t_i.
                    let u: Vec<f64> = g.column(0).iter().zip(totals).map(|(gi, t)| gi / t).collect();
                    let x = self.value(*input);
                    let mut ux = x.clone();
                    for (mut row, ui) in ux.outer_iter_mut().zip(&u) {
                        row.mapv_inplace(|v| v * ui);
                    }
                    let mut dh = exps.dot(x);
                    for (mut row, ui) in dh.outer_iter_mut().zip(&u) {
                        row.mapv_inplace(|v| v * ui);
                    }
                    dh += &exps.t().dot(&ux);
                    dh.mapv_inplace(|v| v * inv_tau);
                    self.accumulate(*input, dh);
                }
            }
        }
        self.nodes[idx].op = op;
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

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn row_softmax(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for mut row in y.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum().max(EPS);
        row.mapv_inplace(|v| v / total);
    }
    y
}

/// Divides each row by its Euclidean norm (clamped below at [`EPS`]).
pub fn row_l2_normalize(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for mut row in y.outer_iter_mut() {
        let norm = row.dot(&row).sqrt().max(EPS);
        row.mapv_inplace(|v| v / norm);
    }
    y
}

/// `‖z_i − c_j‖²` for every row pair, computed from differences (never the
/// expanded form, which can go negative).
pub fn pairwise_sq_dist(z: &Matrix, centers: &Matrix) -> Matrix {
    let mut out = Matrix::zeros((z.nrows(), centers.nrows()));
    for (zrow, mut orow) in z.outer_iter().zip(out.outer_iter_mut()) {
        for (c, o) in centers.outer_iter().zip(orow.iter_mut()) {
            *o = zrow.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    out
}

/// Central-difference gradient check.
///
/// `build` receives a fresh graph whose trainable leaves are the `params` (in
/// order) and returns the scalar loss. Returns the largest normwise relative
/// error over the parameters, `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)` for the
/// analytic gradient `a` and the numeric gradient `n` of each parameter
/// matrix. Entries far smaller than the rest of their matrix sit at the
/// roundoff floor `ε·|loss|/step` of the difference quotient, so they are
/// judged against the matrix scale rather than their own.
pub fn grad_check<F>(params: &[Matrix], step: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let mut eval = |ps: &[Matrix]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        let (mut diff, mut scale) = (0.0f64, 1e-8f64);
        for idx in 0..params[p].len() {
            let (r, c) = (idx / params[p].ncols(), idx % params[p].ncols());
            let orig = work[p][[r, c]];
            work[p][[r, c]] = orig + step;
            let (gp, _, lp) = eval(&work)?;
            let plus = gp.scalar(lp);
            work[p][[r, c]] = orig - step;
            let (gm, _, lm) = eval(&work)?;
            let minus = gm.scalar(lm);
            work[p][[r, c]] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p][[r, c]];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
