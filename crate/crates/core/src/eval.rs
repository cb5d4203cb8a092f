//! Report generation for single volumes and batch evaluation over a corpus
//! split.
//!
//! Candidate text is scored against the reference in token space: generated
//! ids map straight to their surface forms, references go through the shared
//! tokenizer, so scoring never depends on a decode/re-tokenize round trip.

use ctscribe_tensor::{no_grad, Scalar, Tensor};

use crate::blocks::derive_seed;
use crate::error::Result;
use crate::generate::generate;
use crate::lm::splice_embeddings;
use crate::metrics::{evaluate_pairs, EvalReport};
use crate::model::ModelBundle;
use crate::prompt::{assemble_prompt, pick_instruction};
use crate::vocab::{tokenize_text, Vocab};

/// One record queued for evaluation: cached visual tokens plus the
/// reference report.
pub struct EvalRecord<T: Scalar> {
    pub id: String,
    pub visual: Tensor<T>,
    pub reference: String,
}

/// Generate report token ids for one volume's cached visual tokens.
pub fn generate_ids<T: Scalar>(
    bundle: &ModelBundle<T>,
    vocab: &Vocab,
    visual: &Tensor<T>,
    instruction: &str,
    temperature: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    no_grad(|| {
        let m_v = bundle.project_visual(visual)?;
        let sample = assemble_prompt(vocab, &bundle.cfg.prompt.system, instruction, None);
        let spliced = splice_embeddings(&sample, Some(&m_v), bundle.lm.embedding_table())?;
        generate(
            &bundle.lm,
            Some(&bundle.lora),
            &spliced.embeds,
            temperature,
            bundle.cfg.generate.max_new_tokens,
            seed,
        )
    })
}

/// Generate a report as text.
pub fn generate_report<T: Scalar>(
    bundle: &ModelBundle<T>,
    vocab: &Vocab,
    visual: &Tensor<T>,
    instruction: &str,
    temperature: f64,
    seed: u64,
) -> Result<String> {
    let ids = generate_ids(bundle, vocab, visual, instruction, temperature, seed)?;
    Ok(vocab.decode(&ids))
}

/// Surface forms for generated ids.
pub fn ids_to_tokens(vocab: &Vocab, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or("<unk>").to_string())
        .collect()
}

/// Generate a report per record at the given temperature and score it
/// against the reference. The instruction for each record is the same
/// seed-stable pick used at training time; each record draws its own
/// generation seed.
pub fn evaluate_records<T: Scalar>(
    bundle: &ModelBundle<T>,
    vocab: &Vocab,
    records: &[EvalRecord<T>],
    temperature: f64,
    seed: u64,
    checkpoint_id: &str,
    corpus_id: &str,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let instruction = pick_instruction(seed, &r.id);
        let ids = generate_ids(
            bundle,
            vocab,
            &r.visual,
            instruction,
            temperature,
            derive_seed(seed, &format!("gen-{}", r.id)),
        )?;
        items.push((
            r.id.clone(),
            ids_to_tokens(vocab, &ids),
            tokenize_text(&r.reference),
        ));
    }
    evaluate_pairs(&items, temperature, checkpoint_id, corpus_id)
}
