//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a valid topological order. [`Graph::backward`] walks the nodes once
//! in reverse and accumulates gradients into leaves that require them. The
//! graph is built for one forward pass and dropped after its gradients have
//! been harvested.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Rows whose L2 norm falls below this are passed through unnormalized.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    MeanRows(Var),
    MeanCols(Var),
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: Axis },
    Exp(Var),
    Log(Var),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::MeanRows(..) => "mean_rows",
            Op::MeanCols(..) => "mean_cols",
            Op::Sum(..) => "sum",
            Op::Concat { .. } => "concat",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
        }
    }
}

/// Concatenation axis: 0 stacks rows, 1 stacks columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: idx,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            param: None,
        });
        Ok(Var(idx))
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same node, so aliased parameters share one gradient buffer.
    /// Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let value = store.read(id).clone();
        let v = self.push(value, Op::Leaf, !store.is_frozen(id))?;
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Adds the accumulated gradient of every bound, trainable parameter
    /// into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.bound {
            if let Some(g) = &self.nodes[v.0].grad {
                store.add_grad(id, g);
            }
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * k);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Mean over rows: `m×n -> 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let value = Tensor::new(1, n, out)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Mean over columns: `m×n -> m×1`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        let out = (0..m)
            .map(|r| x.row(r).iter().sum::<f64>() / n as f64)
            .collect();
        let value = Tensor::new(m, 1, out)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanCols(a), rg)
    }

    /// Sum of every entry, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: Axis) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let (r0, c0) = self.shape(first);
        let value = match axis {
            Axis::Rows => {
                if let Some(bad) = inputs.iter().find(|v| self.shape(**v).1 != c0) {
                    return Err(Error::dim(
                        "concat",
                        format!("column count {} vs {c0}", self.shape(*bad).1),
                    ));
                }
                let rows: usize = inputs.iter().map(|v| self.shape(*v).0).sum();
                let data = inputs
                    .iter()
                    .flat_map(|v| self.value(*v).data().iter().copied())
                    .collect();
                Tensor::new(rows, c0, data)?
            }
            Axis::Cols => {
                if let Some(bad) = inputs.iter().find(|v| self.shape(**v).0 != r0) {
                    return Err(Error::dim(
                        "concat",
                        format!("row count {} vs {r0}", self.shape(*bad).0),
                    ));
                }
                let cols: usize = inputs.iter().map(|v| self.shape(*v).1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for v in inputs {
                        data.extend_from_slice(self.value(*v).row(r));
                    }
                }
                Tensor::new(r0, cols, data)?
            }
        };
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Natural log; non-positive entries surface as a non-finite error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x.ln() } else { f64::NAN });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        if len == 0 || start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let value = Tensor::new(len, n, x.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceRows { input: a, start }, rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        if len == 0 || start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let data = (0..m)
            .flat_map(|r| x.row(r)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(m, len, data)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols { input: a, start }, rg)
    }

    /// Row lookup `table[indices[i]]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = t.shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of {m} rows"),
            ));
        }
        let data = indices
            .iter()
            .flat_map(|&i| t.row(i).iter().copied())
            .collect();
        let value = Tensor::new(indices.len(), n, data)?;
        let rg = self.any_grad(&[table]);
        self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(m, n, out)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Scales each row to unit L2 norm; rows with norm below [`NORM_EPS`]
    /// pass through unchanged.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.shape();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = x.row(r);
            let norm = row_norm(row);
            if norm < NORM_EPS {
                out.extend_from_slice(row);
            } else {
                out.extend(row.iter().map(|v| v / norm));
            }
        }
        let value = Tensor::new(m, n, out)?;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::L2NormalizeRows(a), rg)
    }

    /// Populates `grad` on every reachable leaf that requires it with
    /// `d loss / d leaf`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[idx].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    res.push((*a, g.matmul(&vb.transpose())?));
                }
                if self.requires_grad(*b) {
                    res.push((*b, va.transpose().matmul(g)?));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), |u, v| u * v)),
                (*b, g.zip_map(self.value(*a), |u, v| u * v)),
            ],
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        d.set(r, c, g.get(0, c) / m as f64);
                    }
                }
                vec![(*a, d)]
            }
            Op::MeanCols(a) => {
                let (m, n) = self.shape(*a);
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        d.set(r, c, g.get(r, 0) / n as f64);
                    }
                }
                vec![(*a, d)]
            }
            Op::Sum(a) => {
                let (m, n) = self.shape(*a);
                vec![(*a, Tensor::filled(m, n, g.item()))]
            }
            Op::Concat { inputs, axis } => {
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for v in inputs {
                    let (m, n) = self.shape(*v);
                    let d = match axis {
                        Axis::Rows => {
                            let cols = g.cols();
                            Tensor::new(
                                m,
                                n,
                                g.data()[offset * cols..(offset + m) * cols].to_vec(),
                            )?
                        }
                        Axis::Cols => {
                            let data = (0..m)
                                .flat_map(|r| g.row(r)[offset..offset + n].iter().copied())
                                .collect();
                            Tensor::new(m, n, data)?
                        }
                    };
                    offset += match axis {
                        Axis::Rows => m,
                        Axis::Cols => n,
                    };
                    res.push((*v, d));
                }
                res
            }
            Op::Exp(a) => vec![(*a, g.zip_map(y, |u, v| u * v))],
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), |u, x| u / x))],
            Op::SliceRows { input, start } => {
                let (m, n) = self.shape(*input);
                let mut d = Tensor::zeros(m, n);
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                vec![(*input, d)]
            }
            Op::SliceCols { input, start } => {
                let (m, n) = self.shape(*input);
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..g.cols() {
                        d.set(r, start + c, g.get(r, c));
                    }
                }
                vec![(*input, d)]
            }
            Op::GatherRows { table, indices } => {
                let (m, n) = self.shape(*table);
                let mut d = Tensor::zeros(m, n);
                for (out_row, &src) in indices.iter().enumerate() {
                    for c in 0..n {
                        let cur = d.get(src, c);
                        d.set(src, c, cur + g.get(out_row, c));
                    }
                }
                vec![(*table, d)]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = y.shape();
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, u)| p * u).sum();
                    for c in 0..n {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = y.shape();
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..n {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                vec![(*a, d)]
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let (m, n) = x.shape();
                let mut d = Tensor::zeros(m, n);
                for r in 0..m {
                    let norm = row_norm(x.row(r));
                    if norm < NORM_EPS {
                        for c in 0..n {
                            d.set(r, c, g.get(r, c));
                        }
                        continue;
                    }
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, u)| p * u).sum();
                    for c in 0..n {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * dot) / norm);
                    }
                }
                vec![(*a, d)]
            }
        };
        Ok(out)
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Plain (non-recorded) row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = x.shape();
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(m, n, out).expect("shape preserved")
}
