//! Surface-overlap metrics for generated reports: BLEU, ROUGE-1/2/L, an
//! exact-match METEOR core, and distinct-n diversity.
//!
//! All functions are pure over token lists — tokenize once upstream (with
//! [`crate::vocab::tokenize_text`]) and score anywhere. Scores always land in
//! `[0, 1]`.
//!
//! The METEOR here is the exact-unigram core of the full metric: greedy
//! one-to-one alignment, harmonic mean weighted toward recall, and the
//! fragmentation penalty — without stemming or synonym tables, which need
//! external corpora.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{CoreError, Result};

/// Multiset of n-grams with occurrence counts.
fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for win in tokens.windows(n) {
            *map.entry(win).or_default() += 1;
        }
    }
    map
}

/// Clipped n-gram overlap: candidate counts capped at reference counts.
fn clipped_overlap(cand: &[String], reference: &[String], n: usize) -> usize {
    let ref_counts = ngram_counts(reference, n);
    let cand_counts = ngram_counts(cand, n);
    cand_counts
        .into_iter()
        .map(|(gram, c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// BLEU with smoothing: geometric mean of clipped n-gram precisions for
/// n = 1..=min(max_n, len(cand)), each zero precision floored at
/// `1 / (2 * denominator)`, times the brevity penalty `exp(1 - r/c)` when the
/// candidate is shorter than the reference. Empty candidate scores 0.
pub fn bleu(cand: &[String], reference: &[String], max_n: usize) -> f64 {
    if cand.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let top_n = max_n.min(cand.len());
    let mut log_sum = 0.0f64;
    for n in 1..=top_n {
        let denom = cand.len() - n + 1;
        let overlap = clipped_overlap(cand, reference, n);
        let p = if overlap == 0 {
            1.0 / (2.0 * denom as f64)
        } else {
            overlap as f64 / denom as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / top_n as f64).exp();
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (geo * bp).clamp(0.0, 1.0)
}

/// Clipped n-gram precision/recall/F1. F1 is 0 when both P and R are 0.
pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let overlap = clipped_overlap(cand, reference, n) as f64;
    let cand_total = cand.len().saturating_sub(n - 1) as f64;
    let ref_total = reference.len().saturating_sub(n - 1) as f64;
    let p = if cand_total > 0.0 { overlap / cand_total } else { 0.0 };
    let r = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Length of the longest common subsequence, by dynamic programming.
fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1: LCS-based precision (vs. candidate length) and recall (vs.
/// reference length), combined harmonically.
pub fn rouge_l(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Exact-match METEOR core: greedy left-to-right one-to-one unigram
/// alignment, `F = 10PR / (R + 9P)`, fragmentation penalty
/// `1 - 0.5 * (chunks / matches)^3`. Scores 0 with no matches.
pub fn meteor_lite(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // Greedy alignment: walk the candidate, matching each token to the
    // earliest unused identical reference token.
    let mut used = vec![false; reference.len()];
    let mut aligned: Vec<Option<usize>> = Vec::with_capacity(cand.len());
    for tok in cand {
        let hit = reference
            .iter()
            .enumerate()
            .position(|(j, r)| !used[j] && r == tok);
        if let Some(j) = hit {
            used[j] = true;
            aligned.push(Some(j));
        } else {
            aligned.push(None);
        }
    }
    let matches = aligned.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    // Chunks: maximal runs of candidate tokens aligned to consecutive,
    // increasing reference positions.
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for slot in &aligned {
        match (*slot, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *slot;
    }
    let m = matches as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 1.0 - 0.5 * (chunks as f64 / m).powi(3);
    (f_mean * penalty).clamp(0.0, 1.0)
}

/// Pooled diversity: distinct n-grams across all samples over total n-grams.
/// Zero when every sample is shorter than n.
pub fn distinct_n(samples: &[Vec<String>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut total = 0usize;
    let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
    for sample in samples {
        if sample.len() >= n {
            for win in sample.windows(n) {
                total += 1;
                seen.insert(win);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Scores for one candidate/reference pair.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PairScores {
    pub id: String,
    pub bleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rougel: f64,
    pub meteor: f64,
}

/// Per-pair scores plus corpus means and run metadata.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub temperature: f64,
    pub checkpoint_id: String,
    pub corpus_id: String,
    pub pairs: Vec<PairScores>,
    pub mean_bleu: f64,
    pub mean_rouge1: f64,
    pub mean_rouge2: f64,
    pub mean_rougel: f64,
    pub mean_meteor: f64,
}

/// Score a batch of (id, candidate, reference) token-list pairs. Output
/// ordering is stable by record id; corpus means are plain arithmetic means.
pub fn evaluate_pairs(
    items: &[(String, Vec<String>, Vec<String>)],
    temperature: f64,
    checkpoint_id: &str,
    corpus_id: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(CoreError::Config(
            "cannot evaluate an empty pair list".to_string(),
        ));
    }
    use rayon::prelude::*;
    let mut pairs: Vec<PairScores> = items
        .par_iter()
        .map(|(id, cand, reference)| PairScores {
            id: id.clone(),
            bleu: bleu(cand, reference, 4),
            rouge1: rouge_n(cand, reference, 1).2,
            rouge2: rouge_n(cand, reference, 2).2,
            rougel: rouge_l(cand, reference),
            meteor: meteor_lite(cand, reference),
        })
        .collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));

    let n = pairs.len() as f64;
    let mean = |f: fn(&PairScores) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        temperature,
        checkpoint_id: checkpoint_id.to_string(),
        corpus_id: corpus_id.to_string(),
        mean_bleu: mean(|p| p.bleu),
        mean_rouge1: mean(|p| p.rouge1),
        mean_rouge2: mean(|p| p.rouge2),
        mean_rougel: mean(|p| p.rougel),
        mean_meteor: mean(|p| p.meteor),
        pairs,
    })
}

impl EvalReport {
    /// Tab-separated table: a header row of metric names, one row per pair,
    /// and a mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("id\tBLEU\tROUGE-1\tROUGE-2\tROUGE-L\tMETEOR\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                p.id, p.bleu, p.rouge1, p.rouge2, p.rougel, p.meteor
            ));
        }
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.mean_bleu, self.mean_rouge1, self.mean_rouge2, self.mean_rougel, self.mean_meteor
        ));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Contract(format!("report serialization failed: {e}")))
    }
}
