//! `ctscribe` — batch command-line front end for the CT-volume-to-report
//! pipeline: preprocessing, corpus generation, two-stage training, strategy
//! runs, generation, evaluation, gradient checking, and temperature sweeps.
//!
//! Every command validates its configuration before touching data, runs one
//! unit of work, and exits. Exit codes: 0 success, 2 configuration error,
//! 3 data/IO error, 4 contract violation.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ctscribe_core::config::RunConfig;
use ctscribe_core::corpus::{generate_corpus, load_corpus, load_manifest, CorpusStyle};
use ctscribe_core::eval::{evaluate_records, generate_report, EvalRecord};
use ctscribe_core::gradcheck::gradcheck_full;
use ctscribe_core::model::ModelBundle;
use ctscribe_core::prompt::pick_instruction;
use ctscribe_core::trainer::{train_stage, StageKind, StrategyPlan, TrainItem};
use ctscribe_core::vocab::Vocab;
use ctscribe_core::volume::{prepare, read_ctvol, write_prepared};
use ctscribe_core::{derive_seed, CoreError, Result};

#[derive(Parser)]
#[command(
    name = "ctscribe",
    version,
    about = "CT volume to radiology report: preprocess, train, generate, evaluate"
)]
struct Cli {
    /// TOML run configuration; the built-in desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess one raw volume (HU conversion, clip, resample, crop/pad,
    /// normalize) and write the encoder-ready grid.
    Prep {
        /// Output path for the preprocessed volume (PREP container).
        #[arg(long)]
        out: PathBuf,
        /// Input volume (CTVL container).
        volume: PathBuf,
    },

    /// Generate a synthetic labelled corpus (volumes + manifest with splits).
    GenCorpus {
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Report style: short_report or long_report.
        #[arg(long, default_value = "short_report")]
        style: String,
        /// Number of records (minimum 10).
        #[arg(long, default_value_t = 20)]
        n: usize,
    },

    /// Build a vocabulary from the train-split reports of one or more corpora.
    BuildVocab {
        /// Output vocabulary file (token<TAB>id lines).
        #[arg(long)]
        out: PathBuf,
        /// Corpus directories.
        #[arg(required = true)]
        corpora: Vec<PathBuf>,
    },

    /// Stage-1 training from scratch: projector only, encoder and language
    /// model frozen.
    Pretrain {
        /// Corpus directory to train on (train split).
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file from build-vocab.
        #[arg(long)]
        vocab: PathBuf,
        /// Run directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
    },

    /// Stage-2 training on top of a checkpoint: projector and low-rank
    /// adapters, everything else frozen.
    Finetune {
        /// Corpus directory to train on (train split).
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file from build-vocab.
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint to continue from (typically pretrain.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for the checkpoint and loss log.
        #[arg(long)]
        out: PathBuf,
    },

    /// Run a complete training strategy and score the private validation
    /// split.
    RunStrategy {
        /// Strategy name: T1, T2, or T3.
        #[arg(long)]
        plan: String,
        /// Public-proxy corpus directory.
        #[arg(long)]
        public: PathBuf,
        /// Private-proxy corpus directory.
        #[arg(long)]
        private: PathBuf,
        /// Run directory for checkpoints, loss logs, and the report.
        #[arg(long)]
        out: PathBuf,
    },

    /// Generate a report for one volume from a trained checkpoint.
    Generate {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file the checkpoint was trained with.
        #[arg(long)]
        vocab: PathBuf,
        /// Sampling temperature; the configured default when omitted.
        #[arg(long)]
        temperature: Option<f64>,
        /// Optional file to write the report to (stdout always).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Input volume (CTVL container).
        volume: PathBuf,
    },

    /// Generate and score reports for a corpus split.
    Evaluate {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file the checkpoint was trained with.
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Sampling temperature; the configured default when omitted.
        #[arg(long)]
        temperature: Option<f64>,
        /// Optional directory for report.tsv / report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Check every trainable gradient against central finite differences.
    /// Exits nonzero if any parameter fails.
    Gradcheck,

    /// Evaluate one checkpoint across a range of temperatures and print a
    /// metric-vs-temperature table.
    TempSweep {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file the checkpoint was trained with.
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        corpus: PathBuf,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Comma-separated temperatures (default 0.1,0.3,0.5,0.7,0.9).
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
        /// Optional file for the sweep table (TSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::desk();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn parse_style(s: &str) -> Result<CorpusStyle> {
    s.parse::<CorpusStyle>()
}

/// Initialize a bundle shaped for `vocab` and load `checkpoint` into it.
fn load_bundle(cfg: &RunConfig, vocab: &Vocab, checkpoint: &Path, seed: u64) -> Result<ModelBundle<f32>> {
    let bundle = ModelBundle::<f32>::init(cfg, vocab.len(), derive_seed(seed, "model"))?;
    bundle.load(checkpoint)?;
    Ok(bundle)
}

/// Train-split items with visual tokens computed by the bundle's encoder.
fn train_items(
    bundle: &ModelBundle<f32>,
    corpus: &ctscribe_core::corpus::CorpusRecords,
) -> Result<Vec<TrainItem<f32>>> {
    let train = corpus.split("train");
    if train.is_empty() {
        return Err(CoreError::Config(format!(
            "corpus {} has an empty train split",
            corpus.id
        )));
    }
    train
        .iter()
        .map(|r| {
            Ok(TrainItem {
                id: r.id.clone(),
                visual: bundle.visual_tokens(&r.prepared)?,
                report: r.report.clone(),
            })
        })
        .collect()
}

/// Eval records for one split with visual tokens attached.
fn eval_records(
    bundle: &ModelBundle<f32>,
    corpus: &ctscribe_core::corpus::CorpusRecords,
    split: &str,
) -> Result<Vec<EvalRecord<f32>>> {
    let rows = corpus.split(split);
    if rows.is_empty() {
        return Err(CoreError::Config(format!(
            "corpus {} has no records in split {split:?}",
            corpus.id
        )));
    }
    rows.iter()
        .map(|r| {
            Ok(EvalRecord {
                id: r.id.clone(),
                visual: bundle.visual_tokens(&r.prepared)?,
                reference: r.report.clone(),
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CoreError::Data(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed;

    match cli.command {
        Command::Prep { out, volume } => {
            let raw = read_ctvol(&volume)?;
            let prepared = prepare(&raw, cfg.volume.dims, cfg.volume.spacing_mm)?;
            write_prepared(&prepared, &out)?;
            println!(
                "prepared {} {:?} -> {:?} ({} values) at {}",
                raw.id,
                raw.dims,
                prepared.dims,
                prepared.values.len(),
                out.display()
            );
        }

        Command::GenCorpus { out, style, n } => {
            let style = parse_style(&style)?;
            let records = generate_corpus(
                &out,
                n,
                cfg.volume.dims,
                cfg.volume.spacing_mm,
                style,
                seed,
            )?;
            let count = |s: &str| records.iter().filter(|r| r.split == s).count();
            println!(
                "wrote {} records to {} (train {}, val {}, test {})",
                records.len(),
                out.display(),
                count("train"),
                count("val"),
                count("test"),
            );
        }

        Command::BuildVocab { out, corpora } => {
            let mut reports = Vec::new();
            for dir in &corpora {
                let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
                reports.extend(
                    manifest
                        .into_iter()
                        .filter(|m| m.split == "train")
                        .map(|m| m.report),
                );
            }
            let vocab = Vocab::build(&reports)?;
            vocab.save(&out)?;
            println!(
                "vocabulary of {} tokens from {} train reports -> {}",
                vocab.len(),
                reports.len(),
                out.display()
            );
        }

        Command::Pretrain { corpus, vocab, out } => {
            let vocab = Vocab::load(&vocab)?;
            let records = load_corpus(&corpus, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let bundle = ModelBundle::<f32>::init(&cfg, vocab.len(), derive_seed(seed, "model"))?;
            let items = train_items(&bundle, &records)?;
            let report = train_stage(
                &bundle,
                &vocab,
                &items,
                StageKind::Pretrain,
                derive_seed(seed, "pretrain"),
            )?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", out.display())))?;
            write_text(&out.join("pretrain_loss.tsv"), &report.to_tsv())?;
            bundle.save(&out.join("pretrain.ckpt"))?;
            println!(
                "pretrain: {} steps, final loss {:.4}; checkpoint {}",
                report.steps,
                report.final_loss(),
                out.join("pretrain.ckpt").display()
            );
        }

        Command::Finetune {
            corpus,
            vocab,
            checkpoint,
            out,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let records = load_corpus(&corpus, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let bundle = load_bundle(&cfg, &vocab, &checkpoint, seed)?;
            let items = train_items(&bundle, &records)?;
            let report = train_stage(
                &bundle,
                &vocab,
                &items,
                StageKind::Finetune,
                derive_seed(seed, "finetune"),
            )?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", out.display())))?;
            write_text(&out.join("finetune_loss.tsv"), &report.to_tsv())?;
            bundle.save(&out.join("finetune.ckpt"))?;
            println!(
                "finetune: {} steps, final loss {:.4}; checkpoint {}",
                report.steps,
                report.final_loss(),
                out.join("finetune.ckpt").display()
            );
        }

        Command::RunStrategy {
            plan,
            public,
            private,
            out,
        } => {
            let plan = StrategyPlan::from_name(&plan)?;
            let public = load_corpus(&public, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let private = load_corpus(&private, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let mut reports: Vec<String> = public
                .split("train")
                .iter()
                .chain(private.split("train").iter())
                .map(|r| r.report.clone())
                .collect();
            reports.sort();
            let vocab = Vocab::build(&reports)?;
            let outcome = ctscribe_core::trainer::run_strategy::<f32>(
                &cfg,
                &plan,
                &public,
                &private,
                &vocab,
                seed,
                Some(&out),
            )?;
            for (i, st) in outcome.stages.iter().enumerate() {
                println!(
                    "phase {i} {}: {} steps, final loss {:.4}",
                    st.stage,
                    st.steps,
                    st.final_loss()
                );
            }
            println!(
                "{} val: BLEU {:.4} ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4} METEOR {:.4}",
                plan.name,
                outcome.eval.mean_bleu,
                outcome.eval.mean_rouge1,
                outcome.eval.mean_rouge2,
                outcome.eval.mean_rougel,
                outcome.eval.mean_meteor,
            );
            println!("artifacts in {}", out.display());
        }

        Command::Generate {
            checkpoint,
            vocab,
            temperature,
            out,
            volume,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let bundle = load_bundle(&cfg, &vocab, &checkpoint, seed)?;
            let raw = read_ctvol(&volume)?;
            let prepared = prepare(&raw, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let visual = bundle.visual_tokens(&prepared)?;
            let temp = temperature.unwrap_or(cfg.generate.temperature);
            let instruction = pick_instruction(derive_seed(seed, "generate"), &raw.id);
            let text = generate_report(
                &bundle,
                &vocab,
                &visual,
                instruction,
                temp,
                derive_seed(seed, &format!("gen-{}", raw.id)),
            )?;
            println!("{text}");
            if let Some(path) = out {
                write_text(&path, &text)?;
            }
        }

        Command::Evaluate {
            checkpoint,
            vocab,
            corpus,
            split,
            temperature,
            out,
        } => {
            let vocab = Vocab::load(&vocab)?;
            let records = load_corpus(&corpus, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let bundle = load_bundle(&cfg, &vocab, &checkpoint, seed)?;
            let rows = eval_records(&bundle, &records, &split)?;
            let temp = temperature.unwrap_or(cfg.generate.temperature);
            let ckpt_id = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".to_string());
            let corpus_id = format!("{}:{split}", records.id);
            let report = evaluate_records(
                &bundle,
                &vocab,
                &rows,
                temp,
                derive_seed(seed, "eval"),
                &ckpt_id,
                &corpus_id,
            )?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .map_err(|e| CoreError::Data(format!("cannot create {}: {e}", dir.display())))?;
                write_text(&dir.join("report.tsv"), &report.to_table())?;
                write_text(&dir.join("report.json"), &report.to_json()?)?;
                println!("written to {}", dir.display());
            }
        }

        Command::Gradcheck => {
            let report = gradcheck_full(&cfg, seed)?;
            println!(
                "checked {} parameter elements, max relative error {:.3e}",
                report.checked, report.max_rel_err
            );
            if !report.passed() {
                for f in report.failures.iter().take(10) {
                    eprintln!(
                        "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                        f.param, f.element, f.analytic, f.numeric, f.rel_err
                    );
                }
                return Err(CoreError::Contract(format!(
                    "{} gradient elements disagree with finite differences",
                    report.failures.len()
                )));
            }
            println!("all gradients match finite differences");
        }

        Command::TempSweep {
            checkpoint,
            vocab,
            corpus,
            split,
            temperatures,
            out,
        } => {
            let temps = temperatures.unwrap_or_else(|| vec![0.1, 0.3, 0.5, 0.7, 0.9]);
            if temps.is_empty() {
                return Err(CoreError::Config("temperature list is empty".to_string()));
            }
            let vocab = Vocab::load(&vocab)?;
            let records = load_corpus(&corpus, cfg.volume.dims, cfg.volume.spacing_mm)?;
            let bundle = load_bundle(&cfg, &vocab, &checkpoint, seed)?;
            let rows = eval_records(&bundle, &records, &split)?;
            let ckpt_id = checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".to_string());
            let corpus_id = format!("{}:{split}", records.id);

            let mut table = String::from("temperature\tBLEU\tROUGE-1\tROUGE-2\tROUGE-L\tMETEOR\n");
            for &t in &temps {
                let report = evaluate_records(
                    &bundle,
                    &vocab,
                    &rows,
                    t,
                    derive_seed(seed, "eval"),
                    &ckpt_id,
                    &corpus_id,
                )?;
                table.push_str(&format!(
                    "{t:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                    report.mean_bleu,
                    report.mean_rouge1,
                    report.mean_rouge2,
                    report.mean_rougel,
                    report.mean_meteor,
                ));
            }
            print!("{table}");
            if let Some(path) = out {
                write_text(&path, &table)?;
            }
        }
    }
    Ok(())
}
