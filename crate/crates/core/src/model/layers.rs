//! Transformer building blocks evaluated on a tape.

use std::rc::Rc;

use super::params::BoundParams;
use crate::error::Result;
use crate::numerics::{BoolMatrix, Tape, Var};

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

/// Pre-norm residual GELU MLP `d -> ffn_dim -> d`.
#[derive(Clone, Debug)]
pub struct FfnExpert {
    pub(crate) norm: Norm,
    pub(crate) fc1: Linear,
    pub(crate) fc2: Linear,
}

/// Pre-norm residual multi-head self-attention without projection biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub(crate) norm: Norm,
    pub(crate) wq: usize,
    pub(crate) wk: usize,
    pub(crate) wv: usize,
    pub(crate) wo: usize,
}

/// Shared attention plus modality experts: `[V-FFN, L-FFN]` in stage 1,
/// `[VL-FFN]` in stage 2.
#[derive(Clone, Debug)]
pub struct MoMELayer {
    pub(crate) attn: Attention,
    pub(crate) experts: Vec<FfnExpert>,
}

/// Single-head cross-attention projections shared by both fusion directions.
#[derive(Clone, Debug)]
pub struct BafFusionLayer {
    pub(crate) fq: usize,
    pub(crate) fk: usize,
    pub(crate) fv: usize,
}

pub(crate) struct Ctx<'a> {
    pub tape: &'a Tape,
    pub p: &'a BoundParams,
}

impl Ctx<'_> {
    fn v(&self, id: usize) -> Var {
        self.p.var(id)
    }

    pub fn linear(&self, x: Var, l: &Linear) -> Result<Var> {
        let y = self.tape.matmul(x, self.v(l.w))?;
        match l.b {
            Some(b) => self.tape.add_row(y, self.v(b)),
            None => Ok(y),
        }
    }

    pub fn norm(&self, x: Var, n: &Norm) -> Result<Var> {
        self.tape.layer_norm(x, self.v(n.gamma), self.v(n.beta))
    }

    /// `x + fc2(gelu(fc1(norm(x))))`
    pub fn ffn(&self, x: Var, e: &FfnExpert) -> Result<Var> {
        let h = self.norm(x, &e.norm)?;
        let h = self.linear(h, &e.fc1)?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &e.fc2)?;
        self.tape.add(x, h)
    }

    /// `x + W_o concat_h(softmax_mask(q_h k_h^T / sqrt(d_h)) v_h)` on `norm(x)`.
    pub fn self_attention(
        &self,
        x: Var,
        a: &Attention,
        n_heads: usize,
        mask: &Rc<BoolMatrix>,
    ) -> Result<Var> {
        let t = self.tape;
        let h = self.norm(x, &a.norm)?;
        let q = t.matmul(h, self.v(a.wq))?;
        let k = t.matmul(h, self.v(a.wk))?;
        let v = t.matmul(h, self.v(a.wv))?;
        let d = t.value(q).cols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let kt = t.transpose(k)?;
        let mut heads = Vec::with_capacity(n_heads);
        for i in 0..n_heads {
            let cols = i * dh..(i + 1) * dh;
            let (qh, kth, vh) = if n_heads == 1 {
                (q, kt, v)
            } else {
                (
                    t.slice_cols(q, cols.clone())?,
                    t.slice_rows(kt, cols.clone())?,
                    t.slice_cols(v, cols)?,
                )
            };
            let scores = t.scale(t.matmul(qh, kth)?, scale);
            let attn = t.masked_softmax(scores, mask)?;
            heads.push(t.matmul(attn, vh)?);
        }
        let merged = if n_heads == 1 {
            heads[0]
        } else {
            t.concat_cols(&heads)?
        };
        let out = t.matmul(merged, self.v(a.wo))?;
        t.add(x, out)
    }

    /// `softmax((queries F_q)(keys F_k)^T / sqrt(d)) (keys F_v)`
    pub fn cross_attention(&self, queries: Var, keys: Var, f: &BafFusionLayer) -> Result<Var> {
        let t = self.tape;
        let q = t.matmul(queries, self.v(f.fq))?;
        let k = t.matmul(keys, self.v(f.fk))?;
        let v = t.matmul(keys, self.v(f.fv))?;
        let d = t.value(q).cols();
        let scores = t.scale(t.matmul(q, t.transpose(k)?)?, 1.0 / (d as f64).sqrt());
        let attn = t.softmax(scores)?;
        t.matmul(attn, v)
    }
}
