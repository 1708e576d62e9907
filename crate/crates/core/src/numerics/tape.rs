//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. A node
//! keeps its output value plus whatever its backward rule needs; operands are
//! referenced by index, so the tape is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use mope::numerics::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let a = tape.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
//! let b = tape.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
//! let c = tape.matmul(a, b).unwrap();
//! assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
//!
//! let loss = tape.sum(c);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::kernels;
use super::tensor::{BoolMatrix, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate errors in backward rules, used to prove that gradient checks can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.01.
    GeluSlope,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectCols(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<BackwardFault>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::dim(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&self, fault: Option<BackwardFault>) {
        self.fault.set(fault);
    }

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = two_d(av, "matmul")?;
            let (k2, n) = two_d(bv, "matmul")?;
            if k != k2 {
                return Err(Error::dim("matmul", av.shape(), bv.shape()));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
            Tensor::new([m, n], out)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let (m, n) = two_d(av, "transpose")?;
            Tensor::new([n, m], kernels::transpose(av.data(), m, n))?
        };
        Ok(self.push(out, Op::Transpose(a), self.rg(a)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(Error::dim("add", av.shape(), bv.shape()));
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            Tensor::new(av.shape(), data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x[n,d] + bias[d]`, broadcast over rows.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let d = xv.cols();
            if bv.len() != d || xv.ndim() < 1 {
                return Err(Error::dim("add_row", xv.shape(), bv.shape()));
            }
            let mut data = xv.data().to_vec();
            for row in data.chunks_mut(d.max(1)) {
                kernels::add_assign(row, bv.data());
            }
            Tensor::new(xv.shape(), data)?
        };
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(Error::dim("mul", av.shape(), bv.shape()));
            }
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
            Tensor::new(av.shape(), data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let data = av.data().iter().map(|x| x * s).collect();
            Tensor::new(av.shape(), data).expect("same shape")
        };
        self.push(out, Op::Scale(a, s), self.rg(a))
    }

    /// Row-wise softmax over the last axis, restricted to `mask`-allowed entries.
    ///
    /// `scores` has shape `[..., q, k]`; the `[q, k]` mask is broadcast over the
    /// leading axes. A row with no allowed entry is a configuration error.
    pub fn masked_softmax(&self, scores: Var, mask: &Rc<BoolMatrix>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            masked_softmax(&nodes[scores.0].value, mask)?
        };
        Ok(self.push(
            out,
            Op::Softmax(scores),
            self.rg(scores),
        ))
    }

    /// Unrestricted row-wise softmax over the last axis.
    pub fn softmax(&self, scores: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[scores.0].value;
            let k = sv.cols();
            let mut data = Vec::with_capacity(sv.len());
            for r in 0..sv.rows() {
                data.extend(kernels::softmax(sv.row(r)));
            }
            if k == 0 && sv.rows() > 0 {
                return Err(Error::Config("softmax over zero keys".into()));
            }
            Tensor::new(sv.shape(), data)?
        };
        Ok(self.push(out, Op::Softmax(scores), self.rg(scores)))
    }

    /// Row-wise layer normalisation with affine parameters and `eps` = [`LAYER_NORM_EPS`].
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.layer_norm_eps(x, gamma, beta, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let d = xv.cols();
            if d == 0 {
                return Err(Error::dim("layer_norm", xv.shape(), &[1]));
            }
            if gv.len() != d || bv.len() != d {
                return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
            }
            let rows = xv.rows();
            let mut xhat = vec![0.0; xv.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; xv.len()];
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..d {
                    let h = (row[c] - mean) * is;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * gv.data()[c] + bv.data()[c];
                }
            }
            (Tensor::new(xv.shape(), out)?, xhat, inv_std)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact erf-based GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
            Tensor::new(xv.shape(), data).expect("same shape")
        };
        self.push(out, Op::Gelu(x), self.rg(x))
    }

    /// Gathers rows `ids` of `table[vocab, d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[table.0].value;
            let (vocab, d) = two_d(tv, "embedding")?;
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Input(format!(
                        "token id {id} outside vocabulary of size {vocab}"
                    )));
                }
                data.extend_from_slice(tv.row(id));
            }
            Tensor::new([ids.len(), d], data)?
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            self.rg(table),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let d = parts
                .first()
                .map(|p| nodes[p.0].value.cols())
                .ok_or_else(|| Error::Internal("concat_rows of nothing".into()))?;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.ndim() != 2 || v.cols() != d {
                    return Err(Error::dim("concat_rows", &[rows, d], v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new([rows, d], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `range` of a 2-D tensor.
    pub fn slice_rows(&self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, d) = two_d(xv, "slice_rows")?;
            if range.start > range.end || range.end > n {
                return Err(Error::dim("slice_rows", xv.shape(), &[range.start, range.end]));
            }
            Tensor::new(
                [range.len(), d],
                xv.data()[range.start * d..range.end * d].to_vec(),
            )?
        };
        Ok(self.push(out, Op::SliceRows(x, range.start), self.rg(x)))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let n = parts
                .first()
                .map(|p| nodes[p.0].value.rows())
                .ok_or_else(|| Error::Internal("concat_cols of nothing".into()))?;
            let mut total = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.ndim() != 2 || v.rows() != n {
                    return Err(Error::dim("concat_cols", &[n, total], v.shape()));
                }
                total += v.cols();
            }
            let mut data = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::new([n, total], data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `range` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, d) = two_d(xv, "slice_cols")?;
            if range.start > range.end || range.end > d {
                return Err(Error::dim("slice_cols", xv.shape(), &[range.start, range.end]));
            }
            let mut data = Vec::with_capacity(n * range.len());
            for r in 0..n {
                data.extend_from_slice(&xv.row(r)[range.clone()]);
            }
            Tensor::new([n, range.len()], data)?
        };
        Ok(self.push(out, Op::SliceCols(x, range.start), self.rg(x)))
    }

    /// Gathers columns `cols` (in order) of a 2-D tensor or a vector.
    pub fn select_cols(&self, x: Var, cols: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let d = xv.cols();
            if let Some(&bad) = cols.iter().find(|&&c| c >= d) {
                return Err(Error::dim("select_cols", xv.shape(), &[bad]));
            }
            let mut data = Vec::with_capacity(xv.rows() * cols.len());
            for r in 0..xv.rows() {
                let row = xv.row(r);
                data.extend(cols.iter().map(|&c| row[c]));
            }
            let mut shape = xv.shape().to_vec();
            match shape.last_mut() {
                Some(last) => *last = cols.len(),
                None => return Err(Error::dim("select_cols", &[], &[cols.len()])),
            }
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::SelectCols(x, cols.to_vec()), self.rg(x)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits[b, K]`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let (b, k) = two_d(lv, "cross_entropy")?;
            if labels.len() != b {
                return Err(Error::dim("cross_entropy", lv.shape(), &[labels.len()]));
            }
            if b == 0 {
                return Err(Error::Input("cross_entropy over an empty batch".into()));
            }
            let mut probs = Vec::with_capacity(b * k);
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(Error::Input(format!("label {y} outside [0, {k})")));
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (Tensor::scalar(total / b as f64), probs)
        };
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            self.rg(logits),
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::dim("backward", nodes[loss.0].value.shape(), &[1]));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads, fault);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("grad matches value shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn backprop_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<BackwardFault>,
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, bv.data(), ga, m, k, n);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::matmul_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            // out is [n, m]; g transposed back is [m, n]
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::add_assign(ga, &kernels::transpose(g, n, m));
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                kernels::add_assign(ga, g);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                kernels::add_assign(gb, g);
            }
        }
        Op::AddRow(x, bias) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                kernels::add_assign(gx, g);
            }
            let d = val(*bias).len();
            if let Some(gb) = slot(grads, nodes, *bias) {
                for row in g.chunks(d.max(1)) {
                    kernels::add_assign(gb, row);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *o += gi * bi;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += gi * ai;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += s * gi;
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let k = y.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * k..(r + 1) * k];
                    let dot = kernels::dot(yr, gr);
                    for c in 0..k {
                        gx[r * k + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma).data();
            let d = gv.len();
            if let Some(gb) = slot(grads, nodes, *beta) {
                for row in g.chunks(d) {
                    kernels::add_assign(gb, row);
                }
            }
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        gg[c] += grow[c] * hrow[c];
                    }
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut gh = vec![0.0; d];
                for (r, is) in inv_std.iter().enumerate() {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        gh[c] = grow[c] * gv[c];
                    }
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghh = kernels::dot(&gh, hrow) / d as f64;
                    for c in 0..d {
                        gx[r * d + c] += is * (gh[c] - mean_gh - hrow[c] * mean_ghh);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            let slope = match fault {
                Some(BackwardFault::GeluSlope) => 1.01,
                None => 1.0,
            };
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(xv.data()) {
                    *o += gi * kernels::gelu_grad(xi) * slope;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = val(*table).cols();
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    kernels::add_assign(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                if let Some(gp) = slot(grads, nodes, *p) {
                    kernels::add_assign(gp, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::SliceRows(x, start) => {
            let d = val(*x).cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                kernels::add_assign(&mut gx[start * d..start * d + g.len()], g);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                if let Some(gp) = slot(grads, nodes, *p) {
                    for r in 0..node.value.rows() {
                        kernels::add_assign(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(x, start) => {
            let d = val(*x).cols();
            let w = node.value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..node.value.rows() {
                    kernels::add_assign(
                        &mut gx[r * d + start..r * d + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
        }
        Op::SelectCols(x, cols) => {
            let d = val(*x).cols();
            let w = cols.len();
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..node.value.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        gx[r * d + c] += g[r * w + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let k = val(*logits).cols();
            let scale = g[0] / b as f64;
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &y) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}

/// Masked softmax on plain tensors; see [`Tape::masked_softmax`].
pub fn masked_softmax(scores: &Tensor, mask: &BoolMatrix) -> Result<Tensor> {
    if scores.ndim() < 2 {
        return Err(Error::dim("masked_softmax", scores.shape(), &[mask.rows(), mask.cols()]));
    }
    let nd = scores.ndim();
    let (q, k) = (scores.shape()[nd - 2], scores.shape()[nd - 1]);
    if (q, k) != (mask.rows(), mask.cols()) {
        return Err(Error::dim("masked_softmax", scores.shape(), &[mask.rows(), mask.cols()]));
    }
    let mut out = vec![0.0; scores.len()];
    for r in 0..scores.rows() {
        let qi = r % q.max(1);
        if !kernels::masked_softmax_row(scores.row(r), mask.row(qi), &mut out[r * k..(r + 1) * k])
        {
            return Err(Error::Config(format!(
                "attention row {qi} has no allowed key"
            )));
        }
    }
    Tensor::new(scores.shape(), out)
}
