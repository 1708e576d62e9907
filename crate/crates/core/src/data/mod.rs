//! Synthetic cross-modal incongruity task.
//!
//! Each sample pairs a bag of image patches dominated by one polarity prototype
//! with a short token sequence containing one polarity word. The label depends
//! jointly on both polarities, so neither modality alone is informative for
//! the binary (sarcasm-style) task.

mod split;
mod synth;
mod template;

use serde::{Deserialize, Serialize};

pub use split::{make_fewshot_split, read_jsonl, write_jsonl, FewShotSplit, Partition};
pub use synth::{DataConfig, Generator};
pub use template::{apply_template, PromptTemplate, TemplateMode};

use crate::numerics::Tensor;

/// Toy vocabulary. Ids below [`vocab::FIRST_DISTRACTOR`] are reserved.
pub mod vocab {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const MASK: usize = 2;
    pub const POS_TOK: usize = 3;
    pub const NEG_TOK: usize = 4;
    /// Stand-ins for "the image-text pair is".
    pub const PAIR_TEMPLATE: [usize; 4] = [5, 6, 7, 8];
    /// Stand-ins for "sentiment of the text".
    pub const SENTIMENT_TEMPLATE: [usize; 4] = [9, 10, 11, 12];
    pub const WORD_NONSARCASTIC: usize = 13;
    pub const WORD_SARCASTIC: usize = 14;
    pub const WORD_NEGATIVE: usize = 15;
    pub const WORD_NEUTRAL: usize = 16;
    pub const WORD_POSITIVE: usize = 17;
    pub const FIRST_DISTRACTOR: usize = 18;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Binary: 0 = nonsarcasm, 1 = sarcasm.
    Sarcasm2,
    /// Three-way: 0 = negative, 1 = neutral, 2 = positive.
    Sentiment3,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Sarcasm2 => 2,
            Task::Sentiment3 => 3,
        }
    }

    /// Label word per class id.
    pub fn verbalizer(self) -> Vec<usize> {
        match self {
            Task::Sarcasm2 => vec![vocab::WORD_NONSARCASTIC, vocab::WORD_SARCASTIC],
            Task::Sentiment3 => vec![
                vocab::WORD_NEGATIVE,
                vocab::WORD_NEUTRAL,
                vocab::WORD_POSITIVE,
            ],
        }
    }

    pub fn template_words(self) -> &'static [usize] {
        match self {
            Task::Sarcasm2 => &vocab::PAIR_TEMPLATE,
            Task::Sentiment3 => &vocab::SENTIMENT_TEMPLATE,
        }
    }

    /// Class used as "positive" for binary precision/recall.
    pub fn positive_class(self) -> Option<usize> {
        match self {
            Task::Sarcasm2 => Some(SARCASM),
            Task::Sentiment3 => None,
        }
    }

    pub fn label(self, image: Polarity, text: Polarity) -> usize {
        match self {
            Task::Sarcasm2 => {
                if image == text {
                    NONSARCASM
                } else {
                    SARCASM
                }
            }
            Task::Sentiment3 => match (image, text) {
                (Polarity::Pos, Polarity::Pos) => POSITIVE,
                (Polarity::Neg, Polarity::Neg) => NEGATIVE,
                _ => NEUTRAL,
            },
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Sarcasm2 => "sarcasm2",
            Task::Sentiment3 => "sentiment3",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "sarcasm2" => Ok(Task::Sarcasm2),
            "sentiment3" => Ok(Task::Sentiment3),
            other => Err(crate::Error::Input(format!("unknown task {other:?}"))),
        }
    }
}

pub const NONSARCASM: usize = 0;
pub const SARCASM: usize = 1;
pub const NEGATIVE: usize = 0;
pub const NEUTRAL: usize = 1;
pub const POSITIVE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub fn flip(self) -> Self {
        match self {
            Polarity::Pos => Polarity::Neg,
            Polarity::Neg => Polarity::Pos,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub task: Task,
    pub image_polarity: Polarity,
    pub text_polarity: Polarity,
    pub seed: u64,
}

/// One image-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[n_patches, patch_feature_dim]`
    pub patches: Tensor,
    /// Starts with [`vocab::CLS`].
    pub tokens: Vec<usize>,
    /// Offset of [`vocab::MASK`] within `tokens`, when a template placed one.
    pub mask_index: Option<usize>,
    pub label: usize,
    pub meta: SampleMeta,
}
