//! The MoPE-BAF network.
//!
//! Pipeline for one sample:
//!
//! 1. Embed patches and tokens, pack `[V-Prompt | L-Prompt | image | text]`.
//! 2. Run the stage-1 blocks under the restricted mask. Between blocks the
//!    two prompt segments are rebuilt by cross-attention ([`Model::baf_fuse`]).
//! 3. At stage-2 entry drop both modality prompts and prepend fresh VL-Prompt
//!    rows; run the stage-2 layers with full attention and the VL-FFN.
//! 4. Final layer norm; read out `[CLS]` (classification head) or `[MASK]`
//!    (LM head through the verbalizer).

mod config;
mod layers;
mod params;
pub mod reference;

use std::rc::Rc;

pub use config::{HeadKind, ModelConfig, PromptStyle};
pub use layers::{Attention, BafFusionLayer, FfnExpert, MoMELayer};
pub use params::{decays, BoundParams, ParamStore};

use layers::{Ctx, Linear, Norm};
use params::Init;

use crate::data::{vocab, Sample};
use crate::error::{Error, Result};
use crate::layout::{build_layout, build_stage1_mask, build_stage2_mask, partition_blocks, BlockLayout, SequenceLayout};
use crate::numerics::{softmax, BoolMatrix, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use InitKind::*;
    let d = cfg.hidden_dim;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
        out.push(ParamSpec { name, shape, init })
    };
    push("embed.tokens".into(), vec![cfg.vocab_size, d], Normal);
    push("embed.text_pos".into(), vec![cfg.max_text_len, d], Normal);
    push("embed.image_pos".into(), vec![cfg.n_patches, d], Normal);
    push("embed.patch_proj".into(), vec![cfg.patch_feature_dim, d], Normal);
    for (name, len) in [
        ("prompt.vp", cfg.vp_len),
        ("prompt.lp", cfg.lp_len),
        ("prompt.vlp", cfg.vlp_len),
    ] {
        if len > 0 {
            push(name.into(), vec![len, d], Normal);
        }
    }
    let mut layer = |prefix: String, experts: &[&str]| {
        push(format!("{prefix}.attn_norm.gamma"), vec![d], Ones);
        push(format!("{prefix}.attn_norm.beta"), vec![d], Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{prefix}.attn.{w}"), vec![d, d], Normal);
        }
        for e in experts {
            push(format!("{prefix}.{e}.norm.gamma"), vec![d], Ones);
            push(format!("{prefix}.{e}.norm.beta"), vec![d], Zeros);
            push(format!("{prefix}.{e}.fc1.weight"), vec![d, cfg.ffn_dim], Normal);
            push(format!("{prefix}.{e}.fc1.bias"), vec![cfg.ffn_dim], Zeros);
            push(format!("{prefix}.{e}.fc2.weight"), vec![cfg.ffn_dim, d], Normal);
            push(format!("{prefix}.{e}.fc2.bias"), vec![d], Zeros);
        }
    };
    for i in 0..cfg.stage1_layers {
        layer(format!("stage1.{i}"), &["ffn_v", "ffn_l"]);
    }
    for i in 0..cfg.stage2_layers {
        layer(format!("stage2.{i}"), &["ffn_vl"]);
    }
    for b in 0..cfg.block_count.saturating_sub(1) {
        for w in ["fq", "fk", "fv"] {
            push(format!("fusion.{b}.{w}"), vec![d, d], Normal);
        }
    }
    push("final_norm.gamma".into(), vec![d], Ones);
    push("final_norm.beta".into(), vec![d], Zeros);
    push("head.cls.weight".into(), vec![d, cfg.n_classes], Normal);
    push("head.cls.bias".into(), vec![cfg.n_classes], Zeros);
    push("head.lm.weight".into(), vec![d, cfg.vocab_size], Normal);
    push("head.lm.bias".into(), vec![cfg.vocab_size], Zeros);
    out
}

#[derive(Clone, Debug)]
struct Embeddings {
    tokens: usize,
    text_pos: usize,
    image_pos: usize,
    patch_proj: usize,
}

/// Learnable V-Prompt, L-Prompt and VL-Prompt rows (absent when length 0).
#[derive(Clone, Debug)]
pub struct PromptExperts {
    pub(crate) vp: Option<usize>,
    pub(crate) lp: Option<usize>,
    pub(crate) vlp: Option<usize>,
}

/// Classification head over `[CLS]` and LM head over `[MASK]`.
#[derive(Clone, Debug)]
pub struct Heads {
    pub(crate) cls: Linear,
    pub(crate) lm: Linear,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: Embeddings,
    prompts: PromptExperts,
    stage1: Vec<MoMELayer>,
    stage2: Vec<MoMELayer>,
    fusion: Vec<BafFusionLayer>,
    final_norm: Norm,
    heads: Heads,
}

fn resolve(cfg: &ModelConfig, store: &ParamStore) -> Result<Ids> {
    let id = |name: String| {
        store
            .id(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    };
    let norm = |prefix: String| -> Result<Norm> {
        Ok(Norm {
            gamma: id(format!("{prefix}.gamma"))?,
            beta: id(format!("{prefix}.beta"))?,
        })
    };
    let linear = |prefix: String| -> Result<Linear> {
        Ok(Linear {
            w: id(format!("{prefix}.weight"))?,
            b: Some(id(format!("{prefix}.bias"))?),
        })
    };
    let layer = |prefix: String, experts: &[&str]| -> Result<MoMELayer> {
        Ok(MoMELayer {
            attn: Attention {
                norm: norm(format!("{prefix}.attn_norm"))?,
                wq: id(format!("{prefix}.attn.wq"))?,
                wk: id(format!("{prefix}.attn.wk"))?,
                wv: id(format!("{prefix}.attn.wv"))?,
                wo: id(format!("{prefix}.attn.wo"))?,
            },
            experts: experts
                .iter()
                .map(|e| {
                    Ok(FfnExpert {
                        norm: norm(format!("{prefix}.{e}.norm"))?,
                        fc1: linear(format!("{prefix}.{e}.fc1"))?,
                        fc2: linear(format!("{prefix}.{e}.fc2"))?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    };
    let prompt = |name: &str, len: usize| -> Result<Option<usize>> {
        if len == 0 {
            return Ok(None);
        }
        let i = id(name.to_string())?;
        if store.get(i).rows() < len {
            return Err(Error::Config(format!("{name} has fewer than {len} rows")));
        }
        Ok(Some(i))
    };
    Ok(Ids {
        embed: Embeddings {
            tokens: id("embed.tokens".into())?,
            text_pos: id("embed.text_pos".into())?,
            image_pos: id("embed.image_pos".into())?,
            patch_proj: id("embed.patch_proj".into())?,
        },
        prompts: PromptExperts {
            vp: prompt("prompt.vp", cfg.vp_len)?,
            lp: prompt("prompt.lp", cfg.lp_len)?,
            vlp: prompt("prompt.vlp", cfg.vlp_len)?,
        },
        stage1: (0..cfg.stage1_layers)
            .map(|i| layer(format!("stage1.{i}"), &["ffn_v", "ffn_l"]))
            .collect::<Result<_>>()?,
        stage2: (0..cfg.stage2_layers)
            .map(|i| layer(format!("stage2.{i}"), &["ffn_vl"]))
            .collect::<Result<_>>()?,
        fusion: (0..cfg.block_count.saturating_sub(1))
            .map(|b| {
                Ok(BafFusionLayer {
                    fq: id(format!("fusion.{b}.fq"))?,
                    fk: id(format!("fusion.{b}.fk"))?,
                    fv: id(format!("fusion.{b}.fv"))?,
                })
            })
            .collect::<Result<_>>()?,
        final_norm: norm("final_norm".into())?,
        heads: Heads {
            cls: linear("head.cls".into())?,
            lm: linear("head.lm".into())?,
        },
    })
}

/// Final hidden vectors read out for the heads, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub cls: Var,
    pub mask: Option<Var>,
}

/// Parameters plus the configuration that gives them meaning.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    blocks: BlockLayout,
    ids: Ids,
}

impl Model {
    /// Freshly initialised model: weights `N(0, init_std^2)`, biases 0, norm gains 1.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let init = Init {
            seed: cfg.seed,
            std: cfg.init_std,
        };
        let mut params = ParamStore::new();
        for spec in schema(&cfg) {
            let t = match spec.init {
                InitKind::Normal => init.normal(&spec.name, &spec.shape),
                InitKind::Zeros => Tensor::zeros(spec.shape),
                InitKind::Ones => Tensor::full(spec.shape, 1.0),
            };
            params.insert(spec.name, t)?;
        }
        Self::assemble(cfg, params)
    }

    /// Model over an existing parameter set, which must match the schema of
    /// `cfg` exactly (same names, same shapes, nothing extra).
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let specs = schema(&cfg);
        for spec in &specs {
            let t = params
                .by_name(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::dim("parameter", t.shape(), &spec.shape));
            }
        }
        if params.len() != specs.len() {
            let known: std::collections::HashSet<&str> =
                specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&str> = params.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::Config(format!("unknown parameters {extra:?}")));
        }
        Self::assemble(cfg, params)
    }

    /// Same parameters under a stricter configuration (fewer prompts, fewer
    /// blocks). Parameters the new configuration does not use are kept but
    /// never touched by its forward pass.
    pub fn reconfigured(&self, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Self::assemble(cfg, self.params.clone())
    }

    fn assemble(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let ids = resolve(&cfg, &params)?;
        let blocks = partition_blocks(cfg.stage1_layers, cfg.block_count)?;
        Ok(Model {
            cfg,
            params,
            blocks,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn block_layout(&self) -> &BlockLayout {
        &self.blocks
    }

    pub fn bind(&self, tape: &Tape, grads: bool) -> BoundParams {
        self.params.bind(tape, grads)
    }

    /// Parameter ids used by the fusion layers, in boundary order.
    pub fn fusion_param_ids(&self) -> Vec<usize> {
        self.ids
            .fusion
            .iter()
            .flat_map(|f| [f.fq, f.fk, f.fv])
            .collect()
    }

    fn ctx<'a>(&self, tape: &'a Tape, p: &'a BoundParams) -> Ctx<'a> {
        Ctx { tape, p }
    }

    /// Stage-1 layout of `sample` under this configuration.
    pub fn layout_for(&self, sample: &Sample) -> Result<SequenceLayout> {
        build_layout(
            self.cfg.vp_len,
            self.cfg.lp_len,
            self.cfg.n_patches,
            sample.tokens.len(),
            self.cfg.block_count,
        )?
        .with_mask_offset(sample.mask_index)
    }

    /// Stage-1 attention mask for `layout`: restricted for prompt experts,
    /// unrestricted for conventional soft prompts.
    pub fn stage1_mask(&self, layout: &SequenceLayout) -> BoolMatrix {
        match self.cfg.prompt_style {
            PromptStyle::Mope => build_stage1_mask(layout),
            PromptStyle::Soft => BoolMatrix::filled(layout.total_len(), layout.total_len(), true),
        }
    }

    /// Packs prompt rows, projected patches and embedded tokens.
    pub fn embed_inputs(
        &self,
        tape: &Tape,
        p: &BoundParams,
        sample: &Sample,
    ) -> Result<(Var, SequenceLayout)> {
        let cfg = &self.cfg;
        let e = &self.ids.embed;
        if sample.tokens.is_empty() || sample.tokens.len() > cfg.max_text_len {
            return Err(Error::Input(format!(
                "text length {} outside [1, {}]",
                sample.tokens.len(),
                cfg.max_text_len
            )));
        }
        if sample.tokens[0] != vocab::CLS {
            return Err(Error::Input("text must start with [CLS]".into()));
        }
        if sample.patches.shape() != [cfg.n_patches, cfg.patch_feature_dim] {
            return Err(Error::dim(
                "embed_inputs",
                sample.patches.shape(),
                &[cfg.n_patches, cfg.patch_feature_dim],
            ));
        }
        let layout = self.layout_for(sample)?;

        let patches = tape.constant(sample.patches.clone());
        let img = tape.matmul(patches, p.var(e.patch_proj))?;
        let img = tape.add(img, p.var(e.image_pos))?;
        let tok = tape.embedding(p.var(e.tokens), &sample.tokens)?;
        let pos = tape.slice_rows(p.var(e.text_pos), 0..sample.tokens.len())?;
        let txt = tape.add(tok, pos)?;

        let mut parts = Vec::with_capacity(4);
        parts.extend(self.ids.prompts.vp.map(|i| p.var(i)));
        parts.extend(self.ids.prompts.lp.map(|i| p.var(i)));
        if cfg.n_patches > 0 {
            parts.push(img);
        }
        parts.push(txt);
        Ok((tape.concat_rows(&parts)?, layout))
    }

    /// Shared masked self-attention, then V-FFN on `VP ∪ image` rows and
    /// L-FFN on `LP ∪ text` rows.
    pub fn stage1_layer_forward(
        &self,
        tape: &Tape,
        p: &BoundParams,
        layer: usize,
        hidden: Var,
        layout: &SequenceLayout,
        mask: &Rc<BoolMatrix>,
    ) -> Result<Var> {
        let n = layout.total_len();
        if mask.rows() != n || tape.value(hidden).rows() != n {
            return Err(Error::Internal(format!(
                "stage-1 mask {}x{} does not match layout of length {n}",
                mask.rows(),
                mask.cols()
            )));
        }
        let l = &self.ids.stage1[layer];
        let c = self.ctx(tape, p);
        let h = c.self_attention(hidden, &l.attn, self.cfg.n_heads, mask)?;

        let segment = |r: &std::ops::Range<usize>| -> Result<Option<Var>> {
            if r.is_empty() {
                Ok(None)
            } else {
                tape.slice_rows(h, r.clone()).map(Some)
            }
        };
        let (vp, lp, img, txt) = (
            segment(&layout.vp)?,
            segment(&layout.lp)?,
            segment(&layout.img)?,
            segment(&layout.txt)?,
        );
        let route = |a: Option<Var>, b: Option<Var>, expert: &FfnExpert| -> Result<(Option<Var>, Option<Var>)> {
            let parts: Vec<Var> = [a, b].into_iter().flatten().collect();
            if parts.is_empty() {
                return Ok((None, None));
            }
            let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
            let y = c.ffn(x, expert)?;
            match (a, b) {
                (Some(a), Some(_)) => {
                    let na = tape.value(a).rows();
                    let total = tape.value(y).rows();
                    Ok((Some(tape.slice_rows(y, 0..na)?), Some(tape.slice_rows(y, na..total)?)))
                }
                (Some(_), None) => Ok((Some(y), None)),
                (None, _) => Ok((None, Some(y))),
            }
        };
        let (vp, img) = route(vp, img, &l.experts[0])?;
        let (lp, txt) = route(lp, txt, &l.experts[1])?;
        let parts: Vec<Var> = [vp, lp, img, txt].into_iter().flatten().collect();
        tape.concat_rows(&parts)
    }

    /// Rebuilds both prompts across modalities:
    /// V-Prompt from L-Prompt queries over V-Prompt keys/values, and vice versa.
    pub fn baf_fuse(
        &self,
        tape: &Tape,
        p: &BoundParams,
        boundary: usize,
        h_vp: Var,
        h_lp: Var,
    ) -> Result<(Var, Var)> {
        let (pv, pl) = (tape.value(h_vp).rows(), tape.value(h_lp).rows());
        if pv != pl {
            return Err(Error::Config(format!(
                "prompt fusion needs equal prompt lengths, got {pv} and {pl}"
            )));
        }
        let f = self.ids.fusion.get(boundary).ok_or_else(|| {
            Error::Config(format!("no fusion layer for boundary {boundary}"))
        })?;
        let c = self.ctx(tape, p);
        let s_vp = c.cross_attention(h_lp, h_vp, f)?;
        let s_lp = c.cross_attention(h_vp, h_lp, f)?;
        Ok((s_vp, s_lp))
    }

    /// Full self-attention then the VL-FFN on every row.
    pub fn stage2_layer_forward(
        &self,
        tape: &Tape,
        p: &BoundParams,
        layer: usize,
        hidden: Var,
        mask: &Rc<BoolMatrix>,
    ) -> Result<Var> {
        let l = &self.ids.stage2[layer];
        let c = self.ctx(tape, p);
        let h = c.self_attention(hidden, &l.attn, self.cfg.n_heads, mask)?;
        c.ffn(h, &l.experts[0])
    }

    /// Runs the stage-1 blocks with fusion at block boundaries; returns the
    /// final stage-1 hidden state.
    pub fn stage1_forward(
        &self,
        tape: &Tape,
        p: &BoundParams,
        mut h: Var,
        layout: &SequenceLayout,
    ) -> Result<Var> {
        let mask = Rc::new(self.stage1_mask(layout));
        let prompts = !layout.vp.is_empty();
        for (b, span) in self.blocks.spans().into_iter().enumerate() {
            if b > 0 && prompts {
                let h_vp = tape.slice_rows(h, layout.vp.clone())?;
                let h_lp = tape.slice_rows(h, layout.lp.clone())?;
                let (s_vp, s_lp) = self.baf_fuse(tape, p, b - 1, h_vp, h_lp)?;
                let rest = tape.slice_rows(h, layout.img.start..layout.total_len())?;
                h = tape.concat_rows(&[s_vp, s_lp, rest])?;
            }
            for layer in span {
                h = self.stage1_layer_forward(tape, p, layer, h, layout, &mask)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &Tape, p: &BoundParams, sample: &Sample) -> Result<ForwardOutput> {
        let (h, layout) = self.embed_inputs(tape, p, sample)?;
        let h = self.stage1_forward(tape, p, h, &layout)?;

        // stage-2 entry
        let (mut h, text_start) = match self.cfg.prompt_style {
            PromptStyle::Mope => {
                let rest = tape.slice_rows(h, layout.img.start..layout.total_len())?;
                match self.ids.prompts.vlp {
                    Some(vlp) => (
                        tape.concat_rows(&[p.var(vlp), rest])?,
                        self.cfg.vlp_len + layout.img.len(),
                    ),
                    None => (rest, layout.img.len()),
                }
            }
            PromptStyle::Soft => (h, layout.txt.start),
        };
        let n = tape.value(h).rows();
        let mask2 = Rc::new(match self.cfg.prompt_style {
            PromptStyle::Mope => build_stage2_mask(self.cfg.vlp_len, layout.img.len(), layout.txt.len()),
            PromptStyle::Soft => BoolMatrix::filled(n, n, true),
        });
        for layer in 0..self.cfg.stage2_layers {
            h = self.stage2_layer_forward(tape, p, layer, h, &mask2)?;
        }
        self.read_out(tape, p, h, text_start, sample.mask_index)
    }

    /// Final layer norm on the `[CLS]` (and `[MASK]`) rows.
    pub(crate) fn read_out(
        &self,
        tape: &Tape,
        p: &BoundParams,
        h: Var,
        text_start: usize,
        mask_offset: Option<usize>,
    ) -> Result<ForwardOutput> {
        let c = self.ctx(tape, p);
        let cls = tape.slice_rows(h, text_start..text_start + 1)?;
        let cls = c.norm(cls, &self.ids.final_norm)?;
        let mask = match mask_offset {
            Some(o) => {
                let m = tape.slice_rows(h, text_start + o..text_start + o + 1)?;
                Some(c.norm(m, &self.ids.final_norm)?)
            }
            None => None,
        };
        Ok(ForwardOutput { cls, mask })
    }

    /// Class logits `[1, n_classes]` from the configured head.
    pub fn head_logits(&self, tape: &Tape, p: &BoundParams, out: &ForwardOutput) -> Result<Var> {
        let c = self.ctx(tape, p);
        match self.cfg.head {
            HeadKind::Classification => c.linear(out.cls, &self.ids.heads.cls),
            HeadKind::LmVerbalizer => {
                let m = out.mask.ok_or_else(|| {
                    Error::Config("LM head needs a template with a [MASK] slot".into())
                })?;
                let lm = &self.ids.heads.lm;
                let w = tape.select_cols(p.var(lm.w), &self.cfg.verbalizer)?;
                let y = tape.matmul(m, w)?;
                match lm.b {
                    Some(b) => {
                        let b = tape.select_cols(p.var(b), &self.cfg.verbalizer)?;
                        tape.add_row(y, b)
                    }
                    None => Ok(y),
                }
            }
        }
    }

    pub fn logits(&self, tape: &Tape, p: &BoundParams, sample: &Sample) -> Result<Var> {
        if self.cfg.head == HeadKind::LmVerbalizer && sample.mask_index.is_none() {
            return Err(Error::Config(
                "LM head needs a template with a [MASK] slot".into(),
            ));
        }
        let out = self.forward(tape, p, sample)?;
        self.head_logits(tape, p, &out)
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, tape: &Tape, p: &BoundParams, batch: &[&Sample]) -> Result<Var> {
        let rows = batch
            .iter()
            .map(|s| self.logits(tape, p, s))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat_rows(&rows)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        tape.cross_entropy(logits, &labels)
    }

    /// Class probabilities for one sample.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let l = self.logits(&tape, &p, sample)?;
        let v = tape.value(l);
        Ok(softmax(v.data()))
    }

    pub fn predict_class(&self, sample: &Sample) -> Result<usize> {
        Ok(argmax(&self.predict(sample)?))
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
