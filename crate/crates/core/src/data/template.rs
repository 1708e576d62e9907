use serde::{Deserialize, Serialize};

use super::{vocab, Sample, Task};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// Hard template with a `[MASK]` slot.
    Manual,
    /// Learnable virtual tokens only; the text is left untouched.
    Soft,
    /// Virtual tokens plus the hard template.
    Ptuning,
    #[default]
    None,
}

impl TemplateMode {
    pub fn has_mask(self) -> bool {
        matches!(self, TemplateMode::Manual | TemplateMode::Ptuning)
    }
}

impl std::str::FromStr for TemplateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(TemplateMode::Manual),
            "soft" => Ok(TemplateMode::Soft),
            "ptuning" => Ok(TemplateMode::Ptuning),
            "none" => Ok(TemplateMode::None),
            other => Err(Error::Input(format!("unknown template mode {other:?}"))),
        }
    }
}

/// Text-side template: words inserted after `[CLS]`, followed by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub mode: TemplateMode,
    pub prefix: Vec<usize>,
}

impl PromptTemplate {
    pub fn for_task(mode: TemplateMode, task: Task) -> Self {
        let prefix = if mode.has_mask() {
            task.template_words().to_vec()
        } else {
            Vec::new()
        };
        PromptTemplate { mode, prefix }
    }

    /// Offset of `[MASK]` in the templated token list.
    pub fn mask_position(&self) -> Option<usize> {
        self.mode.has_mask().then(|| 1 + self.prefix.len())
    }

    fn inserted_len(&self) -> usize {
        if self.mode.has_mask() {
            self.prefix.len() + 1
        } else {
            0
        }
    }
}

/// Inserts the template after `[CLS]`. When the result exceeds `max_text_len`,
/// trailing distractor tokens are dropped; the polarity word is kept.
pub fn apply_template(sample: &Sample, template: &PromptTemplate, max_text_len: usize) -> Result<Sample> {
    let mut out = sample.clone();
    if !template.mode.has_mask() {
        return Ok(out);
    }
    if sample.tokens.first() != Some(&vocab::CLS) {
        return Err(Error::Input("text must start with [CLS]".into()));
    }
    if sample.mask_index.is_some() {
        return Err(Error::Input("sample already carries a template".into()));
    }
    let mut body: Vec<usize> = sample.tokens[1..].to_vec();
    let fixed = 1 + template.inserted_len();
    while fixed + body.len() > max_text_len {
        let Some(drop_at) = body
            .iter()
            .rposition(|&t| t != vocab::POS_TOK && t != vocab::NEG_TOK)
        else {
            break;
        };
        body.remove(drop_at);
    }
    if fixed + body.len() > max_text_len {
        return Err(Error::Input(format!(
            "templated text needs {} tokens, limit is {max_text_len}",
            fixed + body.len()
        )));
    }
    let mut tokens = Vec::with_capacity(fixed + body.len());
    tokens.push(vocab::CLS);
    tokens.extend_from_slice(&template.prefix);
    tokens.push(vocab::MASK);
    tokens.extend(body);
    out.tokens = tokens;
    out.mask_index = template.mask_position();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{DataConfig, Generator};
    use super::*;

    fn six_token_sample() -> Sample {
        let cfg = DataConfig {
            max_text_len: 6,
            ..DataConfig::default()
        };
        Generator::new(cfg).unwrap().gen_sample(Task::Sarcasm2, 3)
    }

    #[test]
    fn none_and_soft_leave_tokens_alone() {
        let s = six_token_sample();
        for mode in [TemplateMode::None, TemplateMode::Soft] {
            let t = PromptTemplate::for_task(mode, Task::Sarcasm2);
            assert_eq!(apply_template(&s, &t, 64).unwrap(), s);
        }
    }

    #[test]
    fn manual_template_counts() {
        let s = six_token_sample();
        assert_eq!(s.tokens.len(), 6);
        let t = PromptTemplate::for_task(TemplateMode::Manual, Task::Sarcasm2);
        let out = apply_template(&s, &t, 40).unwrap();
        assert_eq!(out.tokens.len(), 11);
        assert_eq!(out.mask_index, Some(5));
        assert_eq!(out.tokens[5], vocab::MASK);
        assert_eq!(&out.tokens[1..5], &vocab::PAIR_TEMPLATE);
        assert_eq!(&out.tokens[6..], &s.tokens[1..]);
    }

    #[test]
    fn overflow_truncates_distractors_but_keeps_polarity() {
        let g = Generator::new(DataConfig::default()).unwrap();
        let t = PromptTemplate::for_task(TemplateMode::Ptuning, Task::Sarcasm2);
        for seed in 0..40 {
            let s = g.gen_sample(Task::Sarcasm2, seed);
            let out = apply_template(&s, &t, 12).unwrap();
            assert_eq!(out.tokens.len(), 12);
            let pol = s.tokens.iter().find(|&&x| x == vocab::POS_TOK || x == vocab::NEG_TOK);
            assert!(out.tokens.contains(pol.unwrap()));
        }
    }

    #[test]
    fn impossible_fit_is_an_error() {
        let s = six_token_sample();
        let t = PromptTemplate::for_task(TemplateMode::Manual, Task::Sarcasm2);
        // [CLS] + 4 words + [MASK] + polarity = 7 tokens minimum
        assert!(apply_template(&s, &t, 6).is_err());
        assert_eq!(apply_template(&s, &t, 7).unwrap().tokens.len(), 7);
    }
}
