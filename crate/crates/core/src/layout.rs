use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Partition of a token sequence into prefix, vision, instruction and
/// response spans. Spans are contiguous and ordered; the response span runs
/// from `res_start` to the end of whatever sequence is being processed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub pre_span: Range<usize>,
    pub vis_span: Range<usize>,
    pub ins_span: Range<usize>,
    pub res_start: usize,
}

impl SequenceLayout {
    pub fn new(pre_len: usize, vis_len: usize, ins_len: usize) -> Self {
        let vis_start = pre_len;
        let ins_start = vis_start + vis_len;
        let res_start = ins_start + ins_len;
        SequenceLayout {
            pre_span: 0..pre_len,
            vis_span: vis_start..ins_start,
            ins_span: ins_start..res_start,
            res_start,
        }
    }

    /// Length of the prompt (everything before the response).
    pub fn prompt_len(&self) -> usize {
        self.res_start
    }

    pub fn num_vision(&self) -> usize {
        self.vis_span.len()
    }

    pub fn is_vision(&self, pos: usize) -> bool {
        self.vis_span.contains(&pos)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.pre_span.start == 0
            && self.pre_span.end == self.vis_span.start
            && self.vis_span.end == self.ins_span.start
            && self.ins_span.end == self.res_start
            && self.pre_span.start <= self.pre_span.end
            && self.vis_span.start <= self.vis_span.end
            && self.ins_span.start <= self.ins_span.end;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("non-contiguous layout {self:?}")))
        }
    }

    /// Positions that are not vision tokens, among the first `n`.
    pub fn non_vision(&self, n: usize) -> Vec<usize> {
        (0..n).filter(|p| !self.is_vision(*p)).collect()
    }
}

/// A multimodal prompt: prefix text, optional vision features (one row per
/// vision token) and instruction text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prefix: Vec<u32>,
    pub vision: Option<Tensor>,
    pub instruction: Vec<u32>,
}

impl Prompt {
    pub fn text(prefix: Vec<u32>, instruction: Vec<u32>) -> Self {
        Prompt { prefix, vision: None, instruction }
    }

    pub fn num_vision(&self) -> usize {
        self.vision.as_ref().map_or(0, |v| v.rows())
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout::new(self.prefix.len(), self.num_vision(), self.instruction.len())
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.num_vision() + self.instruction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token id at each text position, `None` at vision positions.
    pub fn tokens_by_position(&self) -> Vec<Option<u32>> {
        let mut out: Vec<Option<u32>> = self.prefix.iter().map(|t| Some(*t)).collect();
        out.extend(std::iter::repeat(None).take(self.num_vision()));
        out.extend(self.instruction.iter().map(|t| Some(*t)));
        out
    }
}
