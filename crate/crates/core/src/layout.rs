//! Packed-sequence layout, stage attention masks and stage-1 block partitioning.
//!
//! Stage-1 sequences are packed as `[VP | LP | image | text]`. Receptive fields:
//!
//! | row \ col | VP | LP | image | text |
//! |-----------|----|----|-------|------|
//! | VP        | 1  | 0  | 1     | 0    |
//! | LP        | 0  | 1  | 0     | 1    |
//! | image     | 1  | 0  | 1     | 1    |
//! | text      | 0  | 1  | 1     | 1    |

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::BoolMatrix;

/// Which packed segment a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    VPrompt,
    LPrompt,
    Image,
    Text,
}

impl Segment {
    pub fn label(self) -> &'static str {
        match self {
            Segment::VPrompt => "VP",
            Segment::LPrompt => "LP",
            Segment::Image => "IMG",
            Segment::Text => "TXT",
        }
    }

    /// Whether a row in `self` may attend a column in `other` under the stage-1 mask.
    pub fn attends(self, other: Segment) -> bool {
        use Segment::*;
        matches!(
            (self, other),
            (VPrompt, VPrompt | Image)
                | (LPrompt, LPrompt | Text)
                | (Image, VPrompt | Image | Text)
                | (Text, LPrompt | Image | Text)
        )
    }
}

/// Index spans of the stage-1 packed sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub vp: Range<usize>,
    pub lp: Range<usize>,
    pub img: Range<usize>,
    /// Starts with the `[CLS]` token.
    pub txt: Range<usize>,
    /// Absolute position of `[MASK]`, when the text carries one.
    pub mask_index: Option<usize>,
}

impl SequenceLayout {
    pub fn total_len(&self) -> usize {
        self.txt.end
    }

    pub fn cls_index(&self) -> usize {
        self.txt.start
    }

    pub fn segment_of(&self, pos: usize) -> Option<Segment> {
        [
            (&self.vp, Segment::VPrompt),
            (&self.lp, Segment::LPrompt),
            (&self.img, Segment::Image),
            (&self.txt, Segment::Text),
        ]
        .into_iter()
        .find(|(r, _)| r.contains(&pos))
        .map(|(_, s)| s)
    }

    pub fn span(&self, seg: Segment) -> Range<usize> {
        match seg {
            Segment::VPrompt => self.vp.clone(),
            Segment::LPrompt => self.lp.clone(),
            Segment::Image => self.img.clone(),
            Segment::Text => self.txt.clone(),
        }
    }

    /// Records a `[MASK]` at `offset` within the text span.
    pub fn with_mask_offset(mut self, offset: Option<usize>) -> Result<Self> {
        self.mask_index = match offset {
            None => None,
            Some(o) if o < self.txt.len() => Some(self.txt.start + o),
            Some(o) => {
                return Err(Error::Input(format!(
                    "[MASK] offset {o} outside text of length {}",
                    self.txt.len()
                )))
            }
        };
        Ok(self)
    }
}

/// Contiguous spans in the order `[VP | LP | image | text]`.
///
/// With more than one block the two modality prompts are fused against each
/// other, so their lengths must match.
pub fn build_layout(
    vp_len: usize,
    lp_len: usize,
    n_patches: usize,
    n_text: usize,
    block_count: usize,
) -> Result<SequenceLayout> {
    if n_text == 0 {
        return Err(Error::Input("text must contain at least [CLS]".into()));
    }
    if block_count > 1 && vp_len != lp_len {
        return Err(Error::Input(format!(
            "prompt fusion needs equal prompt lengths, got V-Prompt {vp_len} and L-Prompt {lp_len}"
        )));
    }
    let vp = 0..vp_len;
    let lp = vp.end..vp.end + lp_len;
    let img = lp.end..lp.end + n_patches;
    let txt = img.end..img.end + n_text;
    Ok(SequenceLayout {
        vp,
        lp,
        img,
        txt,
        mask_index: None,
    })
}

/// Restricted receptive-field mask for stage-1 layers.
pub fn build_stage1_mask(layout: &SequenceLayout) -> BoolMatrix {
    let n = layout.total_len();
    let seg: Vec<Segment> = (0..n)
        .map(|i| layout.segment_of(i).expect("spans cover the sequence"))
        .collect();
    BoolMatrix::from_fn(n, n, |r, c| seg[r].attends(seg[c]))
}

/// Unrestricted mask over `[VLP | image | text]`.
pub fn build_stage2_mask(vlp_len: usize, n_patches: usize, n_text: usize) -> BoolMatrix {
    let n = vlp_len + n_patches + n_text;
    BoolMatrix::filled(n, n, true)
}

/// Grouping of stage-1 layers into blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub stage1_layers: usize,
    pub block_sizes: Vec<usize>,
    /// Index of the first layer of every block after the first.
    pub fusion_boundaries: Vec<usize>,
}

impl BlockLayout {
    pub fn block_count(&self) -> usize {
        self.block_sizes.len()
    }

    /// Layer index ranges per block.
    pub fn spans(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.block_sizes
            .iter()
            .map(|&s| {
                let r = start..start + s;
                start += s;
                r
            })
            .collect()
    }
}

/// Splits `stage1_layers` into `block_count` blocks whose sizes differ by at
/// most one; leftover layers go to the bottom blocks.
pub fn partition_blocks(stage1_layers: usize, block_count: usize) -> Result<BlockLayout> {
    if block_count == 0 || block_count > stage1_layers {
        return Err(Error::Config(format!(
            "block count {block_count} must lie in [1, {stage1_layers}]"
        )));
    }
    let base = stage1_layers / block_count;
    let extra = stage1_layers % block_count;
    let block_sizes: Vec<usize> = (0..block_count)
        .map(|b| base + usize::from(b < extra))
        .collect();
    let mut fusion_boundaries = Vec::with_capacity(block_count - 1);
    let mut acc = 0;
    for &s in &block_sizes[..block_count - 1] {
        acc += s;
        fusion_boundaries.push(acc);
    }
    Ok(BlockLayout {
        stage1_layers,
        block_sizes,
        fusion_boundaries,
    })
}
