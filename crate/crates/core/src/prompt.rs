//! Prompt assembly with the image-placeholder sentinel.
//!
//! Every sample follows one fixed layout:
//!
//! ```text
//! [BOS] system-message [STOP] (-200) instruction [STOP] answer [STOP]
//! ```
//!
//! The `-200` sentinel marks where visual-token embeddings are spliced in; it
//! is not a vocabulary entry, which is why prompt ids are signed. In inference
//! mode the answer (and its terminal STOP) is absent. The loss mask is 1
//! exactly on the answer tokens and the final STOP — the system message,
//! instruction, and structural tokens never contribute to the loss.

use crate::blocks::derive_seed;
use crate::vocab::{Vocab, BOS, STOP};

/// Reserved id marking the image-embedding position; never a vocab entry.
pub const IMAGE_SENTINEL: i32 = -200;

/// The fixed instruction set; one is chosen per record, seeded.
pub const INSTRUCTIONS: [&str; 4] = [
    "What findings do you observe in this CT scan?",
    "Could you summarize the observations from this CT scan?",
    "What abnormalities are present in this CT scan?",
    "How would you interpret the results of this CT scan?",
];

/// A fully assembled prompt: signed ids (possibly containing one sentinel)
/// with a per-position loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSample {
    pub ids: Vec<i32>,
    pub loss_mask: Vec<bool>,
}

impl PromptSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the sentinel, if present.
    pub fn sentinel_at(&self) -> Option<usize> {
        self.ids.iter().position(|&id| id == IMAGE_SENTINEL)
    }
}

/// Assemble a prompt. `answer: Some(..)` builds a training sample (the answer
/// plus terminal STOP carry the loss); `None` builds an inference prefix that
/// ends right after the instruction's STOP, with an all-zero mask.
pub fn assemble_prompt(
    vocab: &Vocab,
    system: &str,
    instruction: &str,
    answer: Option<&str>,
) -> PromptSample {
    let mut ids: Vec<i32> = Vec::new();
    let mut mask: Vec<bool> = Vec::new();
    let push = |id: i32, in_loss: bool, ids: &mut Vec<i32>, mask: &mut Vec<bool>| {
        ids.push(id);
        mask.push(in_loss);
    };

    push(BOS as i32, false, &mut ids, &mut mask);
    for id in vocab.encode(system) {
        push(id as i32, false, &mut ids, &mut mask);
    }
    push(STOP as i32, false, &mut ids, &mut mask);
    push(IMAGE_SENTINEL, false, &mut ids, &mut mask);
    for id in vocab.encode(instruction) {
        push(id as i32, false, &mut ids, &mut mask);
    }
    push(STOP as i32, false, &mut ids, &mut mask);
    if let Some(answer) = answer {
        for id in vocab.encode(answer) {
            push(id as i32, true, &mut ids, &mut mask);
        }
        push(STOP as i32, true, &mut ids, &mut mask);
    }
    PromptSample {
        ids,
        loss_mask: mask,
    }
}

/// Deterministically pick one instruction for a record: uniform over the set,
/// stable for a given (seed, record id) pair.
pub fn pick_instruction(seed: u64, record_id: &str) -> &'static str {
    let h = derive_seed(seed, record_id);
    INSTRUCTIONS[(h % INSTRUCTIONS.len() as u64) as usize]
}
