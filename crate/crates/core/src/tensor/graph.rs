//! Tape-based reverse-mode differentiation over 2-D f64 matrices.
//!
//! Every node holds its forward value; `backward` walks the tape in reverse
//! and accumulates adjoints for nodes that depend on a parameter leaf. The
//! primitive set is closed: anything outside [`Op`] cannot be recorded.

use super::{ParamSet, Tensor};
use crate::error::{DgdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Parameter,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    ColMeans(Var),
    Pick(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Parameters of one network recorded on a graph, in `ParamSet` entry order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    trainable: bool,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Parameter, true)
    }

    /// Records every entry of `net` as a leaf. Frozen bindings are constants
    /// and are rejected by [`Gradients::param_map`].
    pub fn bind(&mut self, net: &ParamSet, trainable: bool) -> BoundParams {
        let vars = net
            .entries()
            .iter()
            .map(|(_, t)| {
                if trainable {
                    self.parameter(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars, trainable }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.node(a).value;
        let value = Tensor::from_raw(
            vec![src.rows(), src.cols()],
            src.data().iter().map(|&x| f(x)).collect(),
        );
        let ng = self.node(a).needs_grad;
        self.push(value, op, ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let da = dims(&self.node(a).value);
        let db = dims(&self.node(b).value);
        if da != db {
            return Err(DgdError::Shape(format!(
                "{what}: operand shapes {}x{} and {}x{} differ",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(da)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let va = self.node(a).value.data();
        let vb = self.node(b).value.data();
        let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Tensor::from_raw(vec![r, c], data), op, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(&self.node(a).value);
        let (k2, m) = dims(&self.node(b).value);
        if k != k2 {
            return Err(DgdError::Shape(format!(
                "matmul: {n}x{k} times {k2}x{m}"
            )));
        }
        let data = matmul(self.node(a).value.data(), self.node(b).value.data(), n, k, m);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Tensor::from_raw(vec![n, m], data), Op::MatMul(a, b), ng))
    }

    /// Adds a 1xC row to every row of an RxC matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims(&self.node(a).value);
        let (br, bc) = dims(&self.node(bias).value);
        if br != 1 || bc != c {
            return Err(DgdError::Shape(format!(
                "add_bias: bias {br}x{bc} does not broadcast over {r}x{c}"
            )));
        }
        let b = self.node(bias).value.data();
        let mut data = self.node(a).value.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        let ng = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(Tensor::from_raw(vec![r, c], data), Op::AddBias(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.node(a).needs_grad;
        self.push(Tensor::from_raw(vec![r, c], data), Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.node(a).needs_grad;
        self.push(Tensor::from_raw(vec![r, c], data), Op::LogSoftmax(a), ng)
    }

    /// Sum of all entries, 1x1.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.data().iter().sum();
        let ng = self.node(a).needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all entries, 1x1. An empty operand has mean 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.node(a).value.data();
        let m = if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        };
        let ng = self.node(a).needs_grad;
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Per-row sums, Rx1.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        let data = src.data().chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.node(a).needs_grad;
        self.push(Tensor::from_raw(vec![r, 1], data), Op::RowSums(a), ng)
    }

    /// Per-column means over rows, 1xC.
    pub fn col_means(&mut self, a: Var) -> Result<Var> {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        if r == 0 {
            return Err(DgdError::Shape("col_means of an empty batch".into()));
        }
        let mut data = vec![0.0; c];
        for row in src.data().chunks(c) {
            for (acc, &x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for x in &mut data {
            *x /= r as f64;
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(Tensor::from_raw(vec![1, c], data), Op::ColMeans(a), ng))
    }

    /// Picks column `indices[i]` from row `i`, Rx1.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        if indices.len() != r {
            return Err(DgdError::Shape(format!(
                "pick: {} indices for {r} rows",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= c) {
            return Err(DgdError::Data(format!(
                "pick: index {bad} out of range for {c} columns"
            )));
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &k)| src.data()[i * c + k])
            .collect();
        let ng = self.node(a).needs_grad;
        Ok(self.push(
            Tensor::from_raw(vec![r, 1], data),
            Op::Pick(a, indices.to_vec()),
            ng,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let src = &self.node(a).value;
        let (r, c) = dims(src);
        if start >= end || end > c {
            return Err(DgdError::Shape(format!(
                "slice_cols: {start}..{end} out of 0..{c}"
            )));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for row in src.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(
            Tensor::from_raw(vec![r, end - start], data),
            Op::SliceCols(a, start, end),
            ng,
        ))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let logp = self.log_softmax(logits);
        let picked = self.pick(logp, targets)?;
        let m = self.mean(picked);
        Ok(self.neg(m))
    }

    /// Shannon entropy (nats) of the softmax of each row, Rx1.
    pub fn entropy_rows(&mut self, logits: Var) -> Result<Var> {
        let p = self.softmax(logits);
        let logp = self.log_softmax(logits);
        let plogp = self.mul(p, logp)?;
        let s = self.row_sums(plogp);
        Ok(self.neg(s))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(DgdError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(DgdError::NonFinite(format!(
                "loss value {}",
                root.value.item()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.node(v).needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::MatMul(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                let (n, k) = dims(av);
                let m = bv.cols();
                if self.node(*a).needs_grad {
                    // dA = G * B^T
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.node(*b).needs_grad {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        let arow = &av.data()[i * k..(i + 1) * k];
                        let grow = &g[i * m..(i + 1) * m];
                        for (p, &ap) in arow.iter().enumerate() {
                            if ap == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * m..(p + 1) * m];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += ap * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.node(*bias).needs_grad {
                    let c = out.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.node(*a).value.data();
                let bv = self.node(*b).value.data();
                if self.node(*a).needs_grad {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.node(*b).needs_grad {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * k).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let x = self.node(*a).value.data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Ln(a) => {
                let x = self.node(*a).value.data();
                let d = g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let x = self.node(*a).value.data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.node(*a).value.data();
                let d = g.iter().zip(x).map(|(&gv, &xv)| 2.0 * xv * gv).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let s = dot(grow, yrow);
                    for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut d = vec![0.0; g.len()];
                for ((drow, grow), lrow) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                {
                    let s: f64 = grow.iter().sum();
                    for ((dv, &gv), &lv) in drow.iter_mut().zip(grow).zip(lrow) {
                        *dv = gv - lv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.node(*a).value.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.node(*a).value.len();
                if n > 0 {
                    self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
                }
            }
            Op::RowSums(a) => {
                let c = self.node(*a).value.cols();
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::ColMeans(a) => {
                let r = self.node(*a).value.rows();
                let scaled: Vec<f64> = g.iter().map(|&gv| gv / r as f64).collect();
                let d = (0..r).flat_map(|_| scaled.iter().copied()).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Pick(a, indices) => {
                let c = self.node(*a).value.cols();
                let mut d = vec![0.0; self.node(*a).value.len()];
                for (i, &k) in indices.iter().enumerate() {
                    d[i * c + k] = g[i];
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start, end) => {
                let c = self.node(*a).value.cols();
                let w = end - start;
                let mut d = vec![0.0; self.node(*a).value.len()];
                for (i, grow) in g.chunks(w).enumerate() {
                    d[i * c + start..i * c + end].copy_from_slice(grow);
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// Adjoints from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Raw adjoint of a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v` shaped like its value; zeros when unreached.
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::from_raw(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient map for a trainable binding of `net`.
    pub fn param_map(&self, bound: &BoundParams, net: &ParamSet) -> Result<super::GradientMap> {
        if !bound.trainable {
            return Err(DgdError::Graph(
                "gradients requested for a frozen parameter binding".into(),
            ));
        }
        if bound.vars.len() != net.entries().len() {
            return Err(DgdError::Graph(format!(
                "binding has {} parameters, network has {}",
                bound.vars.len(),
                net.entries().len()
            )));
        }
        let entries = net
            .entries()
            .iter()
            .zip(&bound.vars)
            .map(|((name, t), &v)| {
                let g = match self.get(v) {
                    Some(g) => Tensor::from_raw(t.shape().to_vec(), g.to_vec()),
                    None => Tensor::zeros(t.shape().to_vec()),
                };
                (name.clone(), g)
            })
            .collect();
        Ok(super::GradientMap::from_entries_unchecked(entries))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::new();
        let w = g.parameter(mat(1, 3, &[1.5, -2.0, 0.25]));
        let sq = g.square(w);
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn constant_loss_has_no_parameter_gradient() {
        let mut g = Graph::new();
        let w = g.parameter(mat(1, 2, &[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.tensor(&g, w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_graph_error() {
        let mut g = Graph::new();
        let w = g.parameter(mat(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(DgdError::Graph(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0.0; 6]));
        let b = g.constant(mat(2, 2, &[0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(DgdError::Shape(_))));
        assert!(matches!(g.add(a, b), Err(DgdError::Shape(_))));
        assert!(matches!(g.pick(a, &[0]), Err(DgdError::Shape(_))));
        assert!(matches!(g.pick(a, &[0, 3]), Err(DgdError::Data(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]));
        let p = g.softmax(a);
        for r in 0..2 {
            let s: f64 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = g.log_softmax(a);
        assert!(g.value(lp).is_finite());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut g = Graph::new();
        let a = g.constant(mat(3, 4, &[0.0; 12]));
        let ce = g.cross_entropy(a, &[0, 1, 3]).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);
    }
}
