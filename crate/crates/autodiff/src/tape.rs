//! Append-only computation tape with reverse-mode gradients.
//!
//! Every operation evaluates eagerly and appends one node holding its value
//! plus whatever the backward rule needs. Because nodes are only ever
//! appended, the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.

use log::warn;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Transpose(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    Scale(usize, f64),
    Sum(usize),
    SumWeighted(usize, Tensor),
    Mwse {
        pred: usize,
        labels: Vec<f64>,
        weights: Vec<f64>,
        batch_len: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Parameters of a [`ParamStore`] bound as leaves of one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn val(&self, v: usize) -> &Tensor {
        &self.nodes[v].value
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is tracked, retrievable with [`Adjoints::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "input")
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Param(id), true, "param")
    }

    /// Binds every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Result<Bound> {
        let vars = store
            .ids()
            .map(|id| self.param(store, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.cols() != tb.rows() {
            return Err(shape_err(format!(
                "matmul {:?} by {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta, false, tb, false, 0.0, &mut out);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::MatMul(a.0, b.0), needs, "matmul")
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.cols() != tb.cols() {
            return Err(shape_err(format!(
                "matmul_nt {:?} by {:?}^T",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(ta, false, tb, true, 0.0, &mut out);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::MatMulNt(a.0, b.0), needs, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Add(a.0, b.0), needs, "add")
    }

    /// `x * w + b` with `b` a `1 x out` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.val(x.0), self.val(w.0), self.val(b.0));
        if tx.cols() != tw.rows() || tb.rows() != 1 || tb.cols() != tw.cols() {
            return Err(shape_err(format!(
                "linear x{:?} w{:?} b{:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = Tensor::zeros(tx.rows(), tw.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(tb.data());
        }
        gemm(tx, false, tw, false, 1.0, &mut out);
        let needs = self.needs(x.0) || self.needs(w.0) || self.needs(b.0);
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, needs, "linear")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows of nothing".into()))?;
        let cols = self.val(first.0).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.cols() != cols {
                return Err(shape_err(format!(
                    "concat_rows: {} vs {} columns",
                    cols,
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|p| self.needs(p.0));
        let out = Tensor::new(rows, cols, data)?;
        self.push(
            out,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            needs,
            "concat_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let rows = self.val(first.0).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.rows() != rows {
                return Err(shape_err(format!("concat_cols: {} vs {} rows", rows, t.rows())));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = self.val(p.0);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let needs = parts.iter().any(|p| self.needs(p.0));
        self.push(
            out,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            needs,
            "concat_cols",
        )
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.val(x.0);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(shape_err(format!(
                "select_rows index {bad} out of {} rows",
                t.rows()
            )));
        }
        let out = t.permute_rows(index);
        let needs = self.needs(x.0);
        self.push(out, Op::SelectRows(x.0, index.to_vec()), needs, "select_rows")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x.0).transposed();
        let needs = self.needs(x.0);
        self.push(out, Op::Transpose(x.0), needs, "transpose")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.val(x.0).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(x.0);
        self.push(out, Op::Relu(x.0), needs, "relu")
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        if t.cols() == 0 {
            return Err(shape_err("softmax over empty rows".into()));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
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
        let needs = self.needs(x.0);
        self.push(out, Op::SoftmaxRows(x.0), needs, "softmax_rows")
    }

    /// Row-wise layer normalisation: `gain * (x - mean) / sqrt(var + eps) + bias`,
    /// with population variance. `gain` and `bias` are `1 x cols`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, g, b) = (self.val(x.0), self.val(gain.0), self.val(bias.0));
        let n = t.cols();
        if n < 2 {
            return Err(shape_err(format!("layer norm needs >= 2 columns, got {n}")));
        }
        if g.shape() != [1, n] || b.shape() != [1, n] {
            return Err(shape_err(format!(
                "layer norm gain {:?} / bias {:?} for width {n}",
                g.shape(),
                b.shape()
            )));
        }
        let mut normalized = t.clone();
        let mut out = Tensor::zeros(t.rows(), n);
        let mut inv_std = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = normalized.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
            let o = out.row_mut(r);
            for c in 0..n {
                o[c] = g.data()[c] * row[c] + b.data()[c];
            }
        }
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            out,
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normalized,
                inv_std,
            },
            needs,
            "layer_norm_rows",
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut out = self.val(x.0).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let needs = self.needs(x.0);
        self.push(out, Op::Scale(x.0, factor), needs, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(x.0).sum());
        let needs = self.needs(x.0);
        self.push(out, Op::Sum(x.0), needs, "sum")
    }

    /// `sum(x .* coeffs)` for a constant coefficient tensor.
    pub fn sum_weighted(&mut self, x: Var, coeffs: Tensor) -> Result<Var> {
        let t = self.val(x.0);
        if t.shape() != coeffs.shape() {
            return Err(shape_err(format!(
                "sum_weighted {:?} vs {:?}",
                t.shape(),
                coeffs.shape()
            )));
        }
        let s = t.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum();
        let needs = self.needs(x.0);
        self.push(Tensor::scalar(s), Op::SumWeighted(x.0, coeffs), needs, "sum_weighted")
    }

    /// Mean weighted squared error `(1/batch_len) * sum_i w_i (pred_i - label_i)^2`.
    ///
    /// `pred` is `n x 1`. `batch_len` is normally `n`; a larger value lets a
    /// batch be split across several tapes whose losses add up to the whole.
    pub fn mwse(
        &mut self,
        pred: Var,
        labels: &[f64],
        weights: &[f64],
        batch_len: usize,
    ) -> Result<Var> {
        let p = self.val(pred.0);
        if p.cols() != 1 || p.rows() != labels.len() || labels.len() != weights.len() {
            return Err(shape_err(format!(
                "mwse pred {:?}, {} labels, {} weights",
                p.shape(),
                labels.len(),
                weights.len()
            )));
        }
        if batch_len == 0 {
            return Err(shape_err("mwse with empty batch".into()));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((p, l), w)| w * (p - l) * (p - l))
            .sum();
        let needs = self.needs(pred.0);
        self.push(
            Tensor::scalar(s / batch_len as f64),
            Op::Mwse {
                pred: pred.0,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                batch_len,
            },
            needs,
            "mwse",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(lt.rows(), lt.cols()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        macro_rules! slot {
            ($idx:expr) => {{
                let idx = $idx;
                let shape = self.nodes[idx].value.shape();
                grads[idx].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    gemm(g, false, self.val(*b), true, 1.0, slot!(*a));
                }
                if self.needs(*b) {
                    gemm(self.val(*a), true, g, false, 1.0, slot!(*b));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    gemm(g, false, self.val(*b), false, 1.0, slot!(*a));
                }
                if self.needs(*b) {
                    gemm(g, true, self.val(*a), false, 1.0, slot!(*b));
                }
            }
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.needs(v) {
                        slot!(v).add_assign(g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                if self.needs(*x) {
                    gemm(g, false, self.val(*w), true, 1.0, slot!(*x));
                }
                if self.needs(*w) {
                    gemm(self.val(*x), true, g, false, 1.0, slot!(*w));
                }
                if self.needs(*b) {
                    let gb = slot!(*b);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.val(p).rows();
                    if self.needs(p) {
                        let cols = g.cols();
                        let src = &g.data()[offset * cols..(offset + rows) * cols];
                        for (acc, v) in slot!(p).data_mut().iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).cols();
                    if self.needs(p) {
                        let dst = slot!(p);
                        for r in 0..g.rows() {
                            for (acc, v) in dst
                                .row_mut(r)
                                .iter_mut()
                                .zip(&g.row(r)[offset..offset + cols])
                            {
                                *acc += v;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::SelectRows(x, index) => {
                if self.needs(*x) {
                    let dst = slot!(*x);
                    for (i, &src) in index.iter().enumerate() {
                        for (acc, v) in dst.row_mut(src).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    slot!(*x).add_assign(&g.transposed());
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let input = self.val(*x).data();
                    let dst = slot!(*x);
                    for ((acc, gv), xv) in dst.data_mut().iter_mut().zip(g.data()).zip(input) {
                        if *xv > 0.0 {
                            *acc += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let dst = slot!(*x);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((acc, yv), gv) in dst.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *acc += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = normalized.cols();
                if self.needs(*gain) {
                    let dst = slot!(*gain);
                    for r in 0..g.rows() {
                        for ((acc, gv), xh) in
                            dst.data_mut().iter_mut().zip(g.row(r)).zip(normalized.row(r))
                        {
                            *acc += gv * xh;
                        }
                    }
                }
                if self.needs(*bias) {
                    let dst = slot!(*bias);
                    for r in 0..g.rows() {
                        for (acc, gv) in dst.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                }
                if self.needs(*x) {
                    let gain_v = self.val(*gain).data().to_vec();
                    let dst = slot!(*x);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..g.rows() {
                        let xh = normalized.row(r);
                        for c in 0..n {
                            dxhat[c] = g.row(r)[c] * gain_v[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let is = inv_std[r];
                        for (c, acc) in dst.row_mut(r).iter_mut().enumerate() {
                            *acc += is * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.needs(*x) {
                    for (acc, gv) in slot!(*x).data_mut().iter_mut().zip(g.data()) {
                        *acc += factor * gv;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let s = g.data()[0];
                    slot!(*x).data_mut().iter_mut().for_each(|acc| *acc += s);
                }
            }
            Op::SumWeighted(x, coeffs) => {
                if self.needs(*x) {
                    let s = g.data()[0];
                    for (acc, c) in slot!(*x).data_mut().iter_mut().zip(coeffs.data()) {
                        *acc += s * c;
                    }
                }
            }
            Op::Mwse {
                pred,
                labels,
                weights,
                batch_len,
            } => {
                if self.needs(*pred) {
                    let s = g.data()[0] * 2.0 / *batch_len as f64;
                    let p = self.val(*pred).data().to_vec();
                    let dst = slot!(*pred);
                    for (i, acc) in dst.data_mut().iter_mut().enumerate() {
                        *acc += s * weights[i] * (p[i] - labels[i]);
                    }
                }
            }
        }
    }

    fn param_nodes(&self) -> impl Iterator<Item = (usize, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((i, id)),
            _ => None,
        })
    }
}

/// Gradients of every node reached by a backward sweep.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Gradient with respect to `v`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients for every parameter of `store` bound on `tape`.
    ///
    /// Parameters the loss does not reach get a zero gradient and a warning.
    pub fn param_gradients(&self, tape: &Tape, store: &ParamStore) -> Gradients {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for (node, id) in tape.param_nodes() {
            if let Some(g) = self.wrt(Var(node)) {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        let tensors = out
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    let id = ParamId(i);
                    warn!("parameter {} is disconnected from the loss", store.name(id));
                    let t = store.get(id);
                    Tensor::zeros(t.rows(), t.cols())
                })
            })
            .collect();
        Gradients::from_tensors(tensors)
    }
}
