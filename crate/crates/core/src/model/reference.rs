//! Independent forward pipelines used as oracles.
//!
//! These look parameters up by name and wire the network by hand, without the
//! routing, fusion and prompt-splicing logic of [`super::Model`]. They share
//! only the tape primitives, so agreement with the model is bit-exact.

use std::rc::Rc;

use super::{ModelConfig, ParamStore};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{BoolMatrix, Tape, Tensor, Var};

struct Named<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
}

impl Named<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        let t = self
            .store
            .by_name(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(self.tape.constant(t.clone()))
    }

    fn norm(&self, x: Var, prefix: &str) -> Result<Var> {
        self.tape.layer_norm(
            x,
            self.get(&format!("{prefix}.gamma"))?,
            self.get(&format!("{prefix}.beta"))?,
        )
    }

    fn dense(&self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.tape.matmul(x, self.get(&format!("{prefix}.weight"))?)?;
        self.tape.add_row(y, self.get(&format!("{prefix}.bias"))?)
    }

    fn ffn(&self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{prefix}.norm"))?;
        let h = self.dense(h, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h);
        let h = self.dense(h, &format!("{prefix}.fc2"))?;
        self.tape.add(x, h)
    }

    fn attention(&self, x: Var, prefix: &str, n_heads: usize, mask: &Rc<BoolMatrix>) -> Result<Var> {
        let t = self.tape;
        let h = self.norm(x, &format!("{prefix}.attn_norm"))?;
        let w = |n: &str| self.get(&format!("{prefix}.attn.{n}"));
        let q = t.matmul(h, w("wq")?)?;
        let k = t.matmul(h, w("wk")?)?;
        let v = t.matmul(h, w("wv")?)?;
        let d = t.value(q).cols();
        let dh = d / n_heads;
        let kt = t.transpose(k)?;
        let mut heads = Vec::new();
        for i in 0..n_heads {
            let c = i * dh..(i + 1) * dh;
            let (qh, kh, vh) = if n_heads == 1 {
                (q, kt, v)
            } else {
                (t.slice_cols(q, c.clone())?, t.slice_rows(kt, c.clone())?, t.slice_cols(v, c)?)
            };
            let s = t.scale(t.matmul(qh, kh)?, 1.0 / (dh as f64).sqrt());
            let a = t.masked_softmax(s, mask)?;
            heads.push(t.matmul(a, vh)?);
        }
        let merged = if n_heads == 1 { heads[0] } else { t.concat_cols(&heads)? };
        let out = t.matmul(merged, w("wo")?)?;
        t.add(x, out)
    }

    fn embed(&self, sample: &Sample) -> Result<(Var, Var)> {
        let t = self.tape;
        let img = t.matmul(t.constant(sample.patches.clone()), self.get("embed.patch_proj")?)?;
        let img = t.add(img, self.get("embed.image_pos")?)?;
        let tok = t.embedding(self.get("embed.tokens")?, &sample.tokens)?;
        let pos = t.slice_rows(self.get("embed.text_pos")?, 0..sample.tokens.len())?;
        Ok((img, t.add(tok, pos)?))
    }
}

fn read_cls(n: &Named, h: Var, text_start: usize) -> Result<Tensor> {
    let cls = n.tape.slice_rows(h, text_start..text_start + 1)?;
    let cls = n.norm(cls, "final_norm")?;
    let out = n.tape.value(cls).clone();
    Ok(out)
}

/// Final `[CLS]` vector of the prompt-free two-stage backbone: stage-1 layers
/// with full attention and per-modality FFNs, stage-2 layers with the VL-FFN.
pub fn base_forward(cfg: &ModelConfig, params: &ParamStore, sample: &Sample) -> Result<Tensor> {
    let tape = Tape::new();
    let n = Named { tape: &tape, store: params };
    let (mut img, mut txt) = n.embed(sample)?;
    let n_img = tape.value(img).rows();
    let total = n_img + sample.tokens.len();
    let full = Rc::new(BoolMatrix::filled(total, total, true));
    for i in 0..cfg.stage1_layers {
        let h = tape.concat_rows(&[img, txt])?;
        let h = n.attention(h, &format!("stage1.{i}"), cfg.n_heads, &full)?;
        img = n.ffn(tape.slice_rows(h, 0..n_img)?, &format!("stage1.{i}.ffn_v"))?;
        txt = n.ffn(tape.slice_rows(h, n_img..total)?, &format!("stage1.{i}.ffn_l"))?;
    }
    let mut h = tape.concat_rows(&[img, txt])?;
    for i in 0..cfg.stage2_layers {
        h = n.attention(h, &format!("stage2.{i}"), cfg.n_heads, &full)?;
        h = n.ffn(h, &format!("stage2.{i}.ffn_vl"))?;
    }
    read_cls(&n, h, n_img)
}

/// Final `[CLS]` vector of the prompt-expert network without any fusion:
/// all stage-1 layers run as one block.
pub fn mope_forward(cfg: &ModelConfig, params: &ParamStore, sample: &Sample) -> Result<Tensor> {
    let tape = Tape::new();
    let n = Named { tape: &tape, store: params };
    let (mut img, mut txt) = n.embed(sample)?;
    let slice_prompt = |name: &str, len: usize| -> Result<Var> {
        let p = n.get(name)?;
        tape.slice_rows(p, 0..len)
    };
    let (p, q, ni, nt) = (cfg.vp_len, cfg.lp_len, tape.value(img).rows(), sample.tokens.len());
    let mut vp = if p > 0 { Some(slice_prompt("prompt.vp", p)?) } else { None };
    let mut lp = if q > 0 { Some(slice_prompt("prompt.lp", q)?) } else { None };
    let total = p + q + ni + nt;

    // rows: VP [0,p) LP [p,p+q) IMG [p+q, p+q+ni) TXT [p+q+ni, total)
    let seg = |r: usize| {
        if r < p {
            0
        } else if r < p + q {
            1
        } else if r < p + q + ni {
            2
        } else {
            3
        }
    };
    let allowed = [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]];
    let mask = Rc::new(BoolMatrix::from_fn(total, total, |r, c| {
        allowed[seg(r)][seg(c)] == 1
    }));

    for i in 0..cfg.stage1_layers {
        let parts: Vec<Var> = [vp, lp, Some(img), Some(txt)].into_iter().flatten().collect();
        let h = tape.concat_rows(&parts)?;
        let h = n.attention(h, &format!("stage1.{i}"), cfg.n_heads, &mask)?;
        let v_name = format!("stage1.{i}.ffn_v");
        let l_name = format!("stage1.{i}.ffn_l");
        if p > 0 {
            vp = Some(n.ffn(tape.slice_rows(h, 0..p)?, &v_name)?);
        }
        if q > 0 {
            lp = Some(n.ffn(tape.slice_rows(h, p..p + q)?, &l_name)?);
        }
        img = n.ffn(tape.slice_rows(h, p + q..p + q + ni)?, &v_name)?;
        txt = n.ffn(tape.slice_rows(h, p + q + ni..total)?, &l_name)?;
    }

    let r = cfg.vlp_len;
    let mut parts = Vec::new();
    if r > 0 {
        parts.push(slice_prompt("prompt.vlp", r)?);
    }
    parts.push(img);
    parts.push(txt);
    let mut h = tape.concat_rows(&parts)?;
    let n2 = r + ni + nt;
    let full = Rc::new(BoolMatrix::filled(n2, n2, true));
    for i in 0..cfg.stage2_layers {
        h = n.attention(h, &format!("stage2.{i}"), cfg.n_heads, &full)?;
        h = n.ffn(h, &format!("stage2.{i}.ffn_vl"))?;
    }
    read_cls(&n, h, r + ni)
}

fn layer_norm_rows(x: &[Vec<f64>], gamma: &[f64], beta: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn mm(a: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
    let (k, n) = (w.rows(), w.cols());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                .collect()
        })
        .collect()
}

fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Plain-loop pre-norm transformer layer with unrestricted attention:
/// attention block from `{prefix}.attn*`, then the FFN `{prefix}.{expert}` on every row.
pub fn vanilla_layer(
    x: &Tensor,
    params: &ParamStore,
    prefix: &str,
    expert: &str,
    n_heads: usize,
) -> Result<Tensor> {
    let p = |name: String| {
        params
            .by_name(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    };
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    let d = x.cols();
    let dh = d / n_heads;
    let h = layer_norm_rows(
        &rows,
        p(format!("{prefix}.attn_norm.gamma"))?.data(),
        p(format!("{prefix}.attn_norm.beta"))?.data(),
    );
    let q = mm(&h, p(format!("{prefix}.attn.wq"))?);
    let k = mm(&h, p(format!("{prefix}.attn.wk"))?);
    let v = mm(&h, p(format!("{prefix}.attn.wv"))?);
    let n = rows.len();
    let mut merged = vec![vec![0.0; d]; n];
    for head in 0..n_heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let attn_out = mm(&merged, p(format!("{prefix}.attn.wo"))?);
    let after_attn: Vec<Vec<f64>> = rows
        .iter()
        .zip(&attn_out)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();

    let e = format!("{prefix}.{expert}");
    let h = layer_norm_rows(
        &after_attn,
        p(format!("{e}.norm.gamma"))?.data(),
        p(format!("{e}.norm.beta"))?.data(),
    );
    let b1 = p(format!("{e}.fc1.bias"))?.data();
    let b2 = p(format!("{e}.fc2.bias"))?.data();
    let h: Vec<Vec<f64>> = mm(&h, p(format!("{e}.fc1.weight"))?)
        .into_iter()
        .map(|r| r.iter().zip(b1).map(|(x, b)| erf_gelu(x + b)).collect())
        .collect();
    let h = mm(&h, p(format!("{e}.fc2.weight"))?);
    let out: Vec<f64> = after_attn
        .iter()
        .zip(&h)
        .flat_map(|(a, f)| {
            a.iter()
                .zip(f)
                .zip(b2)
                .map(|((x, y), b)| x + y + b)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new([n, d], out)
}
