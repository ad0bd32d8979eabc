//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for parameter leaves into
//! a [`Grads`] aligned with the [`ParamStore`] the graph was built on.

use std::collections::HashMap;

use crate::tensor::{Grads, Mat, ParamStore};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(usize),
    Embed {
        param: usize,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Mat,
        count: usize,
    },
    Hinge {
        pos: Var,
        neg: Var,
        active: bool,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Rows of parameter `id` selected by `ids`.
    pub fn embed(&mut self, id: usize, ids: &[usize]) -> Var {
        let table = self.params.value(id);
        let mut out = Mat::zeros(ids.len(), table.cols);
        for (r, &tok) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(tok));
        }
        self.push(
            out,
            Op::Embed {
                param: id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, r.cols);
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBT(a, b))
    }

    /// `x · W + b` for parameter ids `w` and `b`.
    pub fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Mat::from_vec(v.rows, v.cols, v.data.iter().map(|&a| gelu(a)).collect());
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 × d` each).
    pub fn layer_norm(&mut self, x: Var, gain: usize, bias: usize) -> Var {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (h, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = xhat.clone();
        for i in 0..n {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols);
        let mut out = Mat::zeros(v.rows, len);
        for i in 0..v.rows {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols].copy_from_slice(v.row(i));
            }
            offset += v.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise softmax. Entries where `allowed` is false get probability zero;
    /// a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Var {
        let v = self.value(x);
        let (n, m) = v.shape();
        if let Some(mask) = allowed {
            assert_eq!(mask.len(), n * m);
        }
        let keep = |i: usize, j: usize| allowed.is_none_or(|mask| mask[i * m + j]);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let row = v.row(i);
            let max = (0..m)
                .filter(|&j| keep(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let orow = out.row_mut(i);
            for j in 0..m {
                if keep(i, j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    /// Mean over rows, producing `1 × d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros(1, v.cols);
        for i in 0..v.rows {
            for (o, a) in out.data.iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        out.scale_assign(1.0 / v.rows as f64);
        self.push(out, Op::MeanRows(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "logits/targets length mismatch");
        let (probs, nll, count) = softmax_nll(lv, targets, ignore);
        let loss = if count == 0 { 0.0 } else { nll / count as f64 };
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        )
    }

    /// `max(0, 1 - pos + neg)` for scalar nodes.
    pub fn hinge(&mut self, pos: Var, neg: Var) -> Var {
        let margin = 1.0 - self.value(pos).data[0] + self.value(neg).data[0];
        let active = margin > 0.0;
        self.push(Mat::scalar(margin.max(0.0)), Op::Hinge { pos, neg, active })
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out.add_assign(self.value(p));
        }
        self.push(out, Op::Sum(parts.to_vec()))
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::new(self.params.len());

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Embed { param, ids } => {
                    let shape = self.params.value(*param).shape();
                    let slot = out.slot_mut(*param, shape.0, shape.1);
                    for (r, &tok) in ids.iter().enumerate() {
                        for (s, v) in slot.row_mut(tok).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let mut rg = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (o, v) in rg.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, rg);
                    acc(&mut grads, *x, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_assign(*s);
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (o, &a) in gx.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(a);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = &self.value(*gain).data;
                    let (n, d) = xhat.shape();
                    let mut ggain = Mat::zeros(1, d);
                    let mut gbias = Mat::zeros(1, d);
                    let mut gx = Mat::zeros(n, d);
                    let mut dxhat = vec![0.0; d];
                    for (i, &inv) in inv_std.iter().enumerate() {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        for j in 0..d {
                            ggain.data[j] += gr[j] * hr[j];
                            gbias.data[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv / d as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = k * (d as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for i in 0..g.rows {
                        gx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - inner);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    let inv = 1.0 / xv.rows as f64;
                    for i in 0..xv.rows {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(&g.data) {
                            *o = v * inv;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore,
                    probs,
                    count,
                } => {
                    let mut gl = Mat::zeros(probs.rows, probs.cols);
                    if *count > 0 {
                        let s = g.data[0] / *count as f64;
                        for (i, &t) in targets.iter().enumerate() {
                            if t == *ignore {
                                continue;
                            }
                            let row = gl.row_mut(i);
                            for (o, p) in row.iter_mut().zip(probs.row(i)) {
                                *o = p * s;
                            }
                            row[t] -= s;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Hinge { pos, neg, active } => {
                    if *active {
                        acc(&mut grads, *pos, Mat::scalar(-g.data[0]));
                        acc(&mut grads, *neg, Mat::scalar(g.data[0]));
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
        }
        out
    }
}

/// Row-wise softmax probabilities and summed NLL over non-ignored rows.
/// Ignored rows are left as zeros in the returned probability matrix.
pub(crate) fn softmax_nll(logits: &Mat, targets: &[usize], ignore: usize) -> (Mat, f64, usize) {
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    let mut nll = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
        nll += log_z - row[t];
        count += 1;
    }
    (probs, nll, count)
}
