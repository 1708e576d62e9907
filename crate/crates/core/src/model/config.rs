use serde::{Deserialize, Serialize};

use crate::data::{vocab, DataConfig, Task};
use crate::error::{Error, Result};

/// Prediction head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear layer over the final `[CLS]` vector.
    #[default]
    Classification,
    /// Vocabulary projection over the final `[MASK]` vector, read through the verbalizer.
    LmVerbalizer,
}

/// How prompt rows enter the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Per-modality prompt experts with restricted receptive fields, fresh
    /// VL-Prompt rows in stage 2, optional block fusion.
    #[default]
    Mope,
    /// Conventional soft prompt: L-Prompt rows prepended to the text, full
    /// attention everywhere, kept through both stages.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub stage1_layers: usize,
    pub stage2_layers: usize,
    pub vp_len: usize,
    pub lp_len: usize,
    pub vlp_len: usize,
    pub block_count: usize,
    pub vocab_size: usize,
    pub patch_feature_dim: usize,
    pub n_patches: usize,
    pub max_text_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default)]
    pub prompt_style: PromptStyle,
    /// Label word id per class, used by the LM head.
    pub verbalizer: Vec<usize>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Task::Sarcasm2)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for `task`.
    pub fn desk(task: Task) -> Self {
        ModelConfig {
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 256,
            stage1_layers: 6,
            stage2_layers: 2,
            vp_len: 10,
            lp_len: 10,
            vlp_len: 10,
            block_count: 2,
            vocab_size: 64,
            patch_feature_dim: 32,
            n_patches: 16,
            max_text_len: 12,
            n_classes: task.n_classes(),
            head: HeadKind::Classification,
            prompt_style: PromptStyle::Mope,
            verbalizer: task.verbalizer(),
            // trained from scratch on 32 samples, 0.02 leaves some seeds short
            // of fitting the training set in 200 steps
            init_std: 0.1,
            seed: 0,
        }
    }

    /// Sequence and depth shapes of the full-size backbone (21 + 3 layers,
    /// 196 patches, text length 40, prompts of 10) at a small hidden width.
    pub fn full_shapes(task: Task) -> Self {
        ModelConfig {
            hidden_dim: 16,
            n_heads: 2,
            ffn_dim: 32,
            stage1_layers: 21,
            stage2_layers: 3,
            n_patches: 196,
            max_text_len: 40,
            init_std: default_init_std(),
            ..Self::desk(task)
        }
    }

    /// Tiny configuration used for exhaustive gradient checks. Weights are
    /// drawn wide enough that every path carries gradients well above
    /// finite-difference resolution.
    pub fn tiny(task: Task) -> Self {
        ModelConfig {
            hidden_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            stage1_layers: 2,
            stage2_layers: 1,
            vp_len: 2,
            lp_len: 2,
            vlp_len: 2,
            block_count: 2,
            vocab_size: 24,
            patch_feature_dim: 6,
            n_patches: 4,
            max_text_len: 8,
            init_std: 0.5,
            ..Self::desk(task)
        }
    }

    /// Conventional soft-prompt variant of this configuration: the L-Prompt
    /// rows are kept, everything else prompt-related is switched off.
    pub fn soft_prompt(&self) -> Self {
        ModelConfig {
            prompt_style: PromptStyle::Soft,
            vp_len: 0,
            vlp_len: 0,
            block_count: 1,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }

    pub fn total_layers(&self) -> usize {
        self.stage1_layers + self.stage2_layers
    }

    /// Generator settings matching this model's input shapes.
    pub fn data_config(&self, data_seed: u64) -> DataConfig {
        DataConfig {
            n_patches: self.n_patches,
            patch_feature_dim: self.patch_feature_dim,
            max_text_len: self.max_text_len,
            vocab_size: self.vocab_size,
            data_seed,
            ..DataConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive".into());
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(
                "n_heads",
                format!("{} does not divide hidden_dim {}", self.n_heads, self.hidden_dim),
            );
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim", "must be positive".into());
        }
        if self.stage1_layers == 0 {
            return bad("stage1_layers", "must be positive".into());
        }
        if self.block_count == 0 || self.block_count > self.stage1_layers {
            return bad(
                "block_count",
                format!(
                    "{} must lie in [1, stage1_layers = {}]",
                    self.block_count, self.stage1_layers
                ),
            );
        }
        if self.block_count > 1 && self.vp_len != self.lp_len {
            return bad(
                "vp_len",
                format!(
                    "prompt fusion needs vp_len == lp_len, got {} and {}",
                    self.vp_len, self.lp_len
                ),
            );
        }
        if self.prompt_style == PromptStyle::Soft {
            if self.vp_len != 0 || self.vlp_len != 0 {
                return bad("prompt_style", "soft prompts use lp_len only; vp_len and vlp_len must be 0".into());
            }
            if self.block_count != 1 {
                return bad("prompt_style", "soft prompts have no block fusion; block_count must be 1".into());
            }
        }
        if self.max_text_len == 0 {
            return bad("max_text_len", "must be positive".into());
        }
        if self.vocab_size <= vocab::FIRST_DISTRACTOR {
            return bad(
                "vocab_size",
                format!("must exceed {} reserved ids", vocab::FIRST_DISTRACTOR),
            );
        }
        if self.n_classes < 2 {
            return bad("n_classes", "need at least two classes".into());
        }
        if self.verbalizer.len() != self.n_classes {
            return bad(
                "verbalizer",
                format!("{} words for {} classes", self.verbalizer.len(), self.n_classes),
            );
        }
        let mut seen = self.verbalizer.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.verbalizer.len() {
            return bad("verbalizer", "label words must be distinct".into());
        }
        if let Some(&id) = self.verbalizer.iter().find(|&&id| id >= self.vocab_size) {
            return bad("verbalizer", format!("word id {id} outside vocabulary"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std", "must be finite and non-negative".into());
        }
        Ok(())
    }
}
