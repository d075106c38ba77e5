//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose parents already exist,
//! so node indices are a topological order and [`Graph::backward`] walks them in reverse.
//! Parameters live outside the graph; a training step binds them as leaves, runs forward and
//! backward, then reads the leaf gradients back out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside `log` so exact zeros map to a large negative number instead of `-inf`.
pub const LOG_FLOOR: f64 = 1e-300;

/// Tolerance for "this row is a probability vector".
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor shape must be nonempty with positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    BiasAdd(Var, Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    Mean(Var),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropySoft(Var, Tensor),
    CrossEntropyHard(Var, Vec<usize>),
    GradReverse(Var, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::BiasAdd(..) => "bias_add",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Log(_) => "log",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::CrossEntropySoft(..) => "cross_entropy_soft",
            Op::CrossEntropyHard(..) => "cross_entropy_hard",
            Op::GradReverse(..) => "grad_reverse",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    /// Operation name of a node, mostly useful in test failure messages.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::Dimension {
                op,
                left: t.shape.clone(),
                right: vec![0, 0],
            });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::Dimension {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x [m×n] + bias [1×n]`, broadcasting the bias over rows.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "bias_add")?;
        let tb = self.value(bias);
        if tb.numel() != n || tb.rows() != 1 {
            return Err(Error::Dimension {
                op: "bias_add",
                left: vec![m, n],
                right: tb.shape.clone(),
            });
        }
        let tx = self.value(x);
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::BiasAdd(x, bias)))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.max(LOG_FLOOR).ln())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a, "concat_cols")?;
        let (m2, q) = self.matrix_dims(b, "concat_cols")?;
        if m != m2 {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: vec![m, p],
                right: vec![m2, q],
            });
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        Ok(self.push(Tensor::matrix(m, p + q, data)?, Op::ConcatCols(a, b)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data.iter().sum::<f64>() / tx.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(logits, "softmax_rows")?;
        let mut data = self.value(logits).data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::SoftmaxRows(logits)))
    }

    /// `-(1/m) Σ_rows Σ_i target_i · ln(pred_i)`.
    pub fn cross_entropy_soft(&mut self, pred: Var, targets: &Tensor) -> Result<Var> {
        let (m, n) = self.matrix_dims(pred, "cross_entropy_soft")?;
        if targets.shape != [m, n] {
            return Err(Error::Dimension {
                op: "cross_entropy_soft",
                left: vec![m, n],
                right: targets.shape.clone(),
            });
        }
        validate_prob_rows(targets, "soft target")?;
        let p = self.value(pred);
        let mut total = 0.0;
        for r in 0..m {
            let mut row_sum = 0.0;
            for (t, q) in targets.row(r).iter().zip(p.row(r)) {
                row_sum += t * q.max(LOG_FLOOR).ln();
            }
            total += row_sum;
        }
        let loss = -total / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySoft(pred, targets.clone()),
        ))
    }

    /// Hard-label cross-entropy. Accumulates in the same order as [`Graph::cross_entropy_soft`]
    /// so one-hot soft targets give the same bits.
    pub fn cross_entropy_hard(&mut self, pred: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(pred, "cross_entropy_hard")?;
        if labels.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy_hard",
                left: vec![m, n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let p = self.value(pred);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            total += p.get(r, label).max(LOG_FLOOR).ln();
        }
        let loss = -total / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyHard(pred, labels.to_vec()),
        ))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::validation(format!(
                "gradient reversal scale must be finite and >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        Ok(self.push(value, Op::GradReverse(x, lambda)))
    }

    /// Accumulates `d root / d node` into every node reachable from `root`.
    ///
    /// Gradients from a fresh pass are added to whatever the nodes already hold; call
    /// [`Graph::zero_grad`] between independent passes.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::validation(format!(
                "backward requires a scalar root, got shape {:?}",
                root_value.shape
            )));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.nodes[i].grad.add_assign(&g);
            for (parent, contribution) in self.local_grads(i, &g) {
                match &mut pending[parent.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data[r * n + j] * tb.data[c * n + j];
                        }
                        da[r * k + c] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    for c in 0..k {
                        let av = ta.data[r * k + c];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &g.data[r * n..(r + 1) * n];
                        for (d, gv) in db[c * n..(c + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                vec![(*a, shaped(ta, da)), (*b, shaped(tb, db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::BiasAdd(x, b) => {
                let tb = self.value(*b);
                let n = tb.numel();
                let mut db = vec![0.0; n];
                for row in g.data.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*b, shaped(tb, db))]
            }
            Op::Tanh(x) => {
                let d = zip_map(g, out, |gv, y| gv * (1.0 - y * y));
                vec![(*x, d)]
            }
            Op::Relu(x) => {
                let d = zip_map(g, self.value(*x), |gv, v| if v > 0.0 { gv } else { 0.0 });
                vec![(*x, d)]
            }
            Op::Log(x) => {
                let d = zip_map(
                    g,
                    self.value(*x),
                    |gv, v| {
                        if v > LOG_FLOOR {
                            gv / v
                        } else {
                            0.0
                        }
                    },
                );
                vec![(*x, d)]
            }
            Op::Scale(x, c) => vec![(*x, zip_map(g, g, |gv, _| c * gv))],
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, q) = (ta.cols(), tb.cols());
                let mut da = Vec::with_capacity(ta.numel());
                let mut db = Vec::with_capacity(tb.numel());
                for row in g.data.chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                vec![(*a, shaped(ta, da)), (*b, shaped(tb, db))]
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.item() / tx.numel() as f64;
                vec![(*x, Tensor::filled(tx.shape(), v))]
            }
            Op::Sum(x) => vec![(*x, Tensor::filled(self.value(*x).shape(), g.item()))],
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let mut d = vec![0.0; out.numel()];
                for ((drow, yrow), grow) in d
                    .chunks_mut(n)
                    .zip(out.data.chunks(n))
                    .zip(g.data.chunks(n))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    for ((dv, y), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gv - dot);
                    }
                }
                vec![(*x, shaped(out, d))]
            }
            Op::CrossEntropySoft(p, targets) => {
                let tp = self.value(*p);
                let m = tp.rows() as f64;
                let scale = g.item() / m;
                let d = zip_map(targets, tp, |t, q| -scale * t / q.max(LOG_FLOOR));
                vec![(*p, d)]
            }
            Op::CrossEntropyHard(p, labels) => {
                let tp = self.value(*p);
                let (m, n) = (tp.rows(), tp.cols());
                let scale = g.item() / m as f64;
                let mut d = vec![0.0; tp.numel()];
                for (r, &label) in labels.iter().enumerate() {
                    d[r * n + label] = -scale / tp.data[r * n + label].max(LOG_FLOOR);
                }
                vec![(*p, shaped(tp, d))]
            }
            Op::GradReverse(x, lambda) => vec![(*x, zip_map(g, g, |gv, _| -lambda * gv))],
        }
    }
}

fn shaped(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor {
        shape: like.shape.clone(),
        data,
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Max-subtracted softmax of one row.
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

pub(crate) fn validate_prob_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        if row.iter().any(|&v| !(0.0..=1.0 + ROW_SUM_TOL).contains(&v)) {
            return Err(Error::validation(format!(
                "{what} row {r} has entries outside [0, 1]"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::validation(format!(
                "{what} row {r} sums to {s}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Plain gradient-descent update `p ← p − α·g` for each `(param, grad)` pair.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], alpha: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::validation(
            "sgd_step: params and grads differ in count",
        ));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        if p.shape != g.shape {
            return Err(Error::Dimension {
                op: "sgd_step",
                left: p.shape.clone(),
                right: g.shape.clone(),
            });
        }
        for (pv, gv) in p.data.iter_mut().zip(&g.data) {
            *pv -= alpha * gv;
        }
    }
    Ok(())
}
