//! Two-stage training and named end-to-end training strategies.
//!
//! Stage 1 (pretrain) fits the projector alone at a high learning rate;
//! stage 2 (finetune) fits projector plus LoRA adapters at a lower rate.
//! The encoder and base LM never train, which the trainer enforces with a
//! fingerprint check on every frozen parameter at each epoch boundary.
//!
//! A strategy is a sequence of (stage, corpus) phases run on one model,
//! followed by a scored evaluation pass. All randomness — shuffles, dropout
//! of nothing, instruction picks, generation — derives from the single run
//! seed, so a strategy is reproducible end to end.

use std::collections::HashMap;
use std::path::Path;

use ctscribe_tensor::{clip_global_norm, zero_grads, Adam, AdamConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::derive_seed;
use crate::config::RunConfig;
use crate::corpus::CorpusRecords;
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_records, EvalRecord};
use crate::lm::splice_embeddings;
use crate::metrics::EvalReport;
use crate::model::{ModelBundle, FINETUNE_PREFIXES, PRETRAIN_PREFIXES};
use crate::prompt::{assemble_prompt, pick_instruction, PromptSample};
use crate::vocab::Vocab;

/// Next-token loss: logits at position `i` are scored against the target at
/// `i + 1`, averaged over positions whose *target* is inside the loss mask.
pub fn masked_lm_loss<T: Scalar>(
    logits: &Tensor<T>,
    target_ids: &[usize],
    target_mask: &[bool],
) -> Result<Tensor<T>> {
    let l = logits.shape()[0];
    if target_ids.len() != l || target_mask.len() != l {
        return Err(CoreError::Contract(format!(
            "loss inputs disagree: {l} logit rows, {} targets, {} mask entries",
            target_ids.len(),
            target_mask.len()
        )));
    }
    if l < 2 {
        return Err(CoreError::Config(
            "sequence of length < 2 has no next-token pairs to score".to_string(),
        ));
    }
    let shifted = logits.narrow(0, 0, l - 1)?;
    shifted
        .cross_entropy_masked(&target_ids[1..], &target_mask[1..])
        .map_err(CoreError::from)
}

/// The two training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretrain,
    Finetune,
}

impl StageKind {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            StageKind::Pretrain => PRETRAIN_PREFIXES,
            StageKind::Finetune => FINETUNE_PREFIXES,
        }
    }

    pub fn lr(self, cfg: &RunConfig) -> f64 {
        match self {
            StageKind::Pretrain => cfg.train.pretrain_lr,
            StageKind::Finetune => cfg.train.finetune_lr,
        }
    }

    pub fn epochs(self, cfg: &RunConfig) -> usize {
        match self {
            StageKind::Pretrain => cfg.train.pretrain_epochs,
            StageKind::Finetune => cfg.train.finetune_epochs,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Finetune => "finetune",
        }
    }
}

/// One training example: cached visual tokens plus the target report.
pub struct TrainItem<T: Scalar> {
    pub id: String,
    pub visual: Tensor<T>,
    pub report: String,
}

/// Loss curve and bookkeeping from one completed stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub steps: usize,
    /// Loss per optimizer step, in step order.
    pub losses: Vec<f64>,
}

impl StageReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// One `step<TAB>loss` line per optimizer step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\n");
        for (i, loss) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i}\t{loss:.8}\n"));
        }
        out
    }
}

/// Run one stage over the items: freeze to the stage's trainable set, then
/// for each epoch visit every item once in a seeded-shuffled order with
/// batch size 1, Adam with linear warmup and cosine decay, and global-norm
/// gradient clipping.
pub fn train_stage<T: Scalar>(
    bundle: &ModelBundle<T>,
    vocab: &Vocab,
    items: &[TrainItem<T>],
    stage: StageKind,
    seed: u64,
) -> Result<StageReport> {
    train_stage_with(bundle, vocab, items, stage, seed, None)
}

/// [`train_stage`] with an override for the number of epochs (used by
/// overfitting checks that need longer schedules than the configured run).
pub fn train_stage_with<T: Scalar>(
    bundle: &ModelBundle<T>,
    vocab: &Vocab,
    items: &[TrainItem<T>],
    stage: StageKind,
    seed: u64,
    epochs_override: Option<usize>,
) -> Result<StageReport> {
    if items.is_empty() {
        return Err(CoreError::Config(format!(
            "{} stage received no training items",
            stage.label()
        )));
    }
    let cfg = &bundle.cfg;
    let epochs = epochs_override.unwrap_or_else(|| stage.epochs(cfg));
    let total_steps = epochs * items.len();
    if total_steps == 0 {
        return Err(CoreError::Config(format!(
            "{} stage has zero steps ({} epochs x {} items)",
            stage.label(),
            epochs,
            items.len()
        )));
    }

    // Assemble the training prompt for every item once; the instruction pick
    // is stable per record for the whole run.
    let samples: Vec<PromptSample> = items
        .iter()
        .map(|item| {
            assemble_prompt(
                vocab,
                &cfg.prompt.system,
                pick_instruction(seed, &item.id),
                Some(&item.report),
            )
        })
        .collect();
    let n_visual = bundle.n_visual();
    for (item, sample) in items.iter().zip(&samples) {
        let spliced_len = sample.ids.len() - 1 + n_visual;
        if spliced_len > cfg.lm.max_seq {
            return Err(CoreError::Config(format!(
                "record {}: spliced length {} exceeds max_seq {}",
                item.id, spliced_len, cfg.lm.max_seq
            )));
        }
    }

    let trainable = bundle.set_trainable(stage.prefixes());
    let frozen_before = bundle.frozen_fingerprints();

    let warmup = ((cfg.train.warmup_frac * total_steps as f64).ceil() as usize).max(1);
    let mut adam = Adam::new(AdamConfig::new(stage.lr(cfg), total_steps, warmup));

    let mut losses = Vec::with_capacity(total_steps);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}")));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        for &idx in &order {
            zero_grads(&trainable);
            let m_v = bundle.project_visual(&items[idx].visual)?;
            let spliced = splice_embeddings(
                &samples[idx],
                Some(&m_v),
                bundle.lm.embedding_table(),
            )?;
            let logits = bundle.lm.forward(&spliced.embeds, Some(&bundle.lora))?;
            let loss = masked_lm_loss(&logits, &spliced.target_ids, &spliced.target_mask)?;
            loss.backward()?;
            clip_global_norm(&trainable, cfg.train.grad_clip)?;
            adam.step(&trainable)?;
            losses.push(loss.item()?.to_f64_c());
        }

        let frozen_now = bundle.frozen_fingerprints();
        if frozen_now != frozen_before {
            let culprit = frozen_before
                .iter()
                .zip(&frozen_now)
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.0.clone())
                .unwrap_or_else(|| "<set changed>".to_string());
            return Err(CoreError::Contract(format!(
                "frozen parameter {culprit} changed during {} epoch {epoch}",
                stage.label()
            )));
        }
    }

    Ok(StageReport {
        stage: stage.label(),
        steps: losses.len(),
        losses,
    })
}

/// Which corpus a phase draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusSel {
    Public,
    Private,
}

/// One phase of a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub stage: StageKind,
    pub corpus: CorpusSel,
}

/// A named training strategy: an ordered list of phases applied to one
/// model. Every strategy is scored on the private validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyPlan {
    pub name: String,
    pub phases: Vec<Phase>,
}

impl StrategyPlan {
    /// The three named strategies:
    /// - `T1`: pretrain on public, finetune on private;
    /// - `T2`: pretrain on private, finetune on private;
    /// - `T3`: pretrain on public, finetune on public.
    pub fn from_name(name: &str) -> Result<Self> {
        let phases = match name {
            "T1" => vec![
                Phase { stage: StageKind::Pretrain, corpus: CorpusSel::Public },
                Phase { stage: StageKind::Finetune, corpus: CorpusSel::Private },
            ],
            "T2" => vec![
                Phase { stage: StageKind::Pretrain, corpus: CorpusSel::Private },
                Phase { stage: StageKind::Finetune, corpus: CorpusSel::Private },
            ],
            "T3" => vec![
                Phase { stage: StageKind::Pretrain, corpus: CorpusSel::Public },
                Phase { stage: StageKind::Finetune, corpus: CorpusSel::Public },
            ],
            other => {
                return Err(CoreError::Config(format!(
                    "unknown strategy {other:?}; expected T1, T2, or T3"
                )))
            }
        };
        Ok(StrategyPlan {
            name: name.to_string(),
            phases,
        })
    }
}

/// Everything a finished strategy run produced.
pub struct StrategyOutcome {
    pub plan: StrategyPlan,
    pub stages: Vec<StageReport>,
    pub eval: EvalReport,
}

/// Run a whole strategy: initialize the model from the seed, run each phase
/// on its corpus's train split, then score the private validation split at
/// the configured sampling temperature.
///
/// When `run_dir` is given, the run writes `config.toml`, per-phase loss
/// logs and checkpoints, and the final report as TSV and JSON.
pub fn run_strategy<T: Scalar>(
    cfg: &RunConfig,
    plan: &StrategyPlan,
    public: &CorpusRecords,
    private: &CorpusRecords,
    vocab: &Vocab,
    seed: u64,
    run_dir: Option<&Path>,
) -> Result<StrategyOutcome> {
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", dir.display())))?;
        let snapshot = toml::to_string_pretty(cfg)
            .map_err(|e| CoreError::Config(format!("config snapshot failed: {e}")))?;
        write_text(&dir.join("config.toml"), &snapshot)?;
    }

    let bundle = ModelBundle::<T>::init(cfg, vocab.len(), derive_seed(seed, "model"))?;

    // Visual tokens are a pure function of the frozen encoder, so cache them
    // per record across phases.
    let mut visual_cache: HashMap<String, Tensor<T>> = HashMap::new();
    let mut visual_for = |corpus: &CorpusRecords,
                          rec_id: &str,
                          prepared: &crate::volume::PreparedVolume|
     -> Result<Tensor<T>> {
        let key = format!("{}/{}", corpus.id, rec_id);
        if let Some(t) = visual_cache.get(&key) {
            return Ok(t.clone());
        }
        let t = bundle.visual_tokens(prepared)?;
        visual_cache.insert(key, t.clone());
        Ok(t)
    };

    let mut stages = Vec::with_capacity(plan.phases.len());
    let mut last_ckpt = format!("{}-seed{}-uninitialized", plan.name, seed);
    for (i, phase) in plan.phases.iter().enumerate() {
        let corpus = match phase.corpus {
            CorpusSel::Public => public,
            CorpusSel::Private => private,
        };
        let train = corpus.split("train");
        if train.is_empty() {
            return Err(CoreError::Config(format!(
                "corpus {} has an empty train split",
                corpus.id
            )));
        }
        let items: Vec<TrainItem<T>> = train
            .iter()
            .map(|r| {
                Ok(TrainItem {
                    id: r.id.clone(),
                    visual: visual_for(corpus, &r.id, &r.prepared)?,
                    report: r.report.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let report = train_stage(
            &bundle,
            vocab,
            &items,
            phase.stage,
            derive_seed(seed, &format!("phase{i}")),
        )?;
        let phase_name = format!("phase{i}_{}", phase.stage.label());
        if let Some(dir) = run_dir {
            write_text(&dir.join(format!("{phase_name}_loss.tsv")), &report.to_tsv())?;
            bundle.save(&dir.join(format!("{phase_name}.ckpt")))?;
        }
        last_ckpt = format!("{}-seed{}-{}", plan.name, seed, phase_name);
        stages.push(report);
    }

    let val = private.split("val");
    if val.is_empty() {
        return Err(CoreError::Config(format!(
            "corpus {} has an empty val split",
            private.id
        )));
    }
    let eval_records: Vec<EvalRecord<T>> = val
        .iter()
        .map(|r| {
            Ok(EvalRecord {
                id: r.id.clone(),
                visual: visual_for(private, &r.id, &r.prepared)?,
                reference: r.report.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let eval = evaluate_records(
        &bundle,
        vocab,
        &eval_records,
        cfg.generate.temperature,
        derive_seed(seed, "eval"),
        &last_ckpt,
        &format!("{}:val", private.id),
    )?;
    if let Some(dir) = run_dir {
        write_text(&dir.join("report.tsv"), &eval.to_table())?;
        write_text(&dir.join("report.json"), &eval.to_json()?)?;
    }

    Ok(StrategyOutcome {
        plan: plan.clone(),
        stages,
        eval,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))
}
