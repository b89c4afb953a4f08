use serde::{Deserialize, Serialize};

use super::synth::{SyntheticExample, Task};
use super::vocab::{PAD, PATCH_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Content of one sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Row of [`Batch::patch_features`].
    Image(usize),
    Text(usize),
}

/// One sequence before batching: image patches first, then text.
#[derive(Clone, Debug)]
pub struct SequenceInput<'a> {
    pub patch_features: &'a [f64],
    pub text_ids: &'a [usize],
    /// `(position, token id)` supervised by the loss.
    pub answer: Option<(usize, usize)>,
    pub task: Option<Task>,
}

/// Right-padded batch of `[image | text | PAD...]` sequences.
///
/// Per-position vectors have length `size * seq_len`; position `t` of sequence `b` lives at
/// `b * seq_len + t`. PAD positions are tagged `Text` and excluded from the loss and from
/// routing statistics.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub patch_features: Vec<f64>,
    pub slots: Vec<Slot>,
    pub tags: Vec<Modality>,
    pub pad: Vec<bool>,
    /// Flat positions carrying a supervised answer, with their targets.
    pub answers: Vec<(usize, usize)>,
    pub tasks: Vec<Option<Task>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[SequenceInput<'_>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.patch_features.len() % PATCH_DIM != 0 {
                return Err(Error::shape(
                    "batch",
                    format!("{} patch values is not a multiple of {PATCH_DIM}", s.patch_features.len()),
                ));
            }
            let len = s.patch_features.len() / PATCH_DIM + s.text_ids.len();
            if len == 0 {
                return Err(Error::invalid("sequence with no image and no text positions"));
            }
            lens.push(len);
        }
        let seq_len = *lens.iter().max().expect("non-empty");
        let total = seqs.len() * seq_len;
        let mut batch = Batch {
            size: seqs.len(),
            seq_len,
            patch_features: Vec::new(),
            slots: Vec::with_capacity(total),
            tags: Vec::with_capacity(total),
            pad: Vec::with_capacity(total),
            answers: Vec::new(),
            tasks: Vec::with_capacity(seqs.len()),
        };
        for (b, s) in seqs.iter().enumerate() {
            let m = s.patch_features.len() / PATCH_DIM;
            let first_row = batch.patch_features.len() / PATCH_DIM;
            batch.patch_features.extend_from_slice(s.patch_features);
            for r in 0..m {
                batch.slots.push(Slot::Image(first_row + r));
                batch.tags.push(Modality::Image);
                batch.pad.push(false);
            }
            for &id in s.text_ids {
                batch.slots.push(Slot::Text(id));
                batch.tags.push(Modality::Text);
                batch.pad.push(false);
            }
            for _ in lens[b]..seq_len {
                batch.slots.push(Slot::Text(PAD));
                batch.tags.push(Modality::Text);
                batch.pad.push(true);
            }
            if let Some((pos, id)) = s.answer {
                if pos < m || pos >= lens[b] {
                    return Err(Error::invalid(format!("answer position {pos} is not a text position")));
                }
                batch.answers.push((b * seq_len + pos, id));
            }
            batch.tasks.push(s.task);
        }
        Ok(batch)
    }

    pub fn from_examples(examples: &[&SyntheticExample]) -> Result<Self> {
        let seqs: Vec<SequenceInput<'_>> = examples
            .iter()
            .map(|e| SequenceInput {
                patch_features: &e.patch_features,
                text_ids: &e.text_ids,
                answer: Some((e.answer_position, e.answer_id)),
                task: Some(e.task),
            })
            .collect();
        Self::from_sequences(&seqs)
    }

    pub fn positions(&self) -> usize {
        self.size * self.seq_len
    }

    pub fn image_rows(&self) -> usize {
        self.patch_features.len() / PATCH_DIM
    }

    /// Per-position loss targets and mask (answer positions only).
    pub fn loss_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let mut targets = vec![0; self.positions()];
        let mut mask = vec![false; self.positions()];
        for &(p, id) in &self.answers {
            targets[p] = id;
            mask[p] = true;
        }
        (targets, mask)
    }

    pub fn non_pad_count(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_cross_modal_example, gen_text_only_example};

    #[test]
    fn mixed_image_counts_pad_to_longest() {
        let a = gen_cross_modal_example(1).unwrap();
        let b = gen_text_only_example(2);
        let batch = Batch::from_examples(&[&a, &b]).unwrap();
        assert_eq!(batch.seq_len, 19);
        assert_eq!(batch.positions(), 38);
        assert_eq!(batch.image_rows(), 16);
        assert_eq!(batch.pad.iter().filter(|p| **p).count(), 15);
        assert!(batch.pad[19 + 4..].iter().all(|p| *p));
        assert_eq!(batch.answers, vec![(18, a.answer_id), (19 + 3, b.answer_id)]);
        assert!(batch.tags[..16].iter().all(|t| *t == Modality::Image));
        assert!(batch.tags[16..].iter().all(|t| *t == Modality::Text));
    }

    #[test]
    fn rejects_empty_inputs() {
        assert!(Batch::from_sequences(&[]).is_err());
        let empty = SequenceInput { patch_features: &[], text_ids: &[], answer: None, task: None };
        assert!(Batch::from_sequences(&[empty]).is_err());
    }
}
