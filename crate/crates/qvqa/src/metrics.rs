//! Evaluation: BLEU-1..4, ROUGE-L, image↔text retrieval accuracy, and the
//! nodule precision/recall protocol. All metrics are pure and deterministic.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, S};

/// Sentence BLEU with clipped modified n-gram precision, uniform geometric
/// mean over orders `1..=max_n`, and the brevity penalty. No smoothing: any
/// zero n-gram precision yields 0. An empty candidate scores 0 by
/// convention.
pub fn bleu(candidate: &[&str], reference: &[&str], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Invalid(format!("max_n {max_n} outside 1..=4")));
    }
    if reference.is_empty() {
        return Err(Error::Invalid("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let p = ngram_precision(candidate, reference, n);
        if p <= 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln() / max_n as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * log_sum.exp())
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_precision(candidate: &[&str], reference: &[&str], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let total: usize = cand.values().sum();
    if total == 0 {
        return 0.0;
    }
    let clipped: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / total as f64
}

/// Recall-weighted F-measure convention of the reference implementation.
pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L: LCS-based F-measure with `P = LCS/|cand|`, `R = LCS/|ref|`,
/// `F = (1+β²)PR / (R + β²P)`.
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> Result<f64> {
    rouge_l_beta(candidate, reference, ROUGE_BETA)
}

pub fn rouge_l_beta(candidate: &[&str], reference: &[&str], beta: f64) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Invalid("rouge_l requires non-empty sequences".into()));
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok((1.0 + beta * beta) * p * r / (r + beta * beta * p))
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn cosine(a: &[S], b: &[S]) -> S {
    let dot: S = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<S>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<S>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

/// Max-over-rows cosine similarity between a feature block and a vector.
pub fn sq_score(block: &Tensor, text: &[S]) -> S {
    let (m, d) = (block.rows(), block.cols());
    (0..m)
        .map(|l| cosine(&block.data()[l * d..(l + 1) * d], text))
        .fold(S::NEG_INFINITY, S::max)
}

/// Top-k paired retrieval accuracy: for each feature `i`, rank all text
/// features by `score` and count a hit iff index `i` ranks in the top `k`.
/// Ties resolve in index order.
pub fn retrieval_accuracy<F>(n: usize, k: usize, score: F) -> Result<f64>
where
    F: Fn(usize, usize) -> S,
{
    if n < 2 {
        return Err(Error::Invalid("retrieval needs at least 2 pairs".into()));
    }
    let mut hits = 0;
    for i in 0..n {
        let own = score(i, i);
        // Rank of the paired text: strictly-better count, earlier ties count
        // as better so index order breaks ties deterministically.
        let better = (0..n)
            .filter(|&j| j != i)
            .filter(|&j| {
                let s = score(i, j);
                s > own || (s == own && j < i)
            })
            .count();
        if better < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Global-feature retrieval (`V` or `T` rows against `T` rows).
pub fn retrieval_top_k_global(feats: &[Vec<S>], texts: &[Vec<S>], k: usize) -> Result<f64> {
    if feats.len() != texts.len() {
        return Err(Error::Invalid("unpaired retrieval inputs".into()));
    }
    retrieval_accuracy(feats.len(), k, |i, j| cosine(&feats[i], &texts[j]))
}

/// Quasi-textual retrieval under the max-over-tokens similarity.
pub fn retrieval_top_k_sq(blocks: &[Tensor], texts: &[Vec<S>], k: usize) -> Result<f64> {
    if blocks.len() != texts.len() {
        return Err(Error::Invalid("unpaired retrieval inputs".into()));
    }
    retrieval_accuracy(blocks.len(), k, |i, j| sq_score(&blocks[i], &texts[j]))
}

/// Binary nodule-recognition protocol: a generated report predicts positive
/// iff it mentions `"hypoechoic nodule"`. Precision is `None` when nothing
/// is predicted positive.
pub fn nodule_pr(generated: &[String], labels: &[bool]) -> Result<(Option<f64>, f64)> {
    if generated.is_empty() || generated.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "nodule_pr: {} reports vs {} labels",
            generated.len(),
            labels.len()
        )));
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::Invalid("nodule_pr requires at least one positive label".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for (text, &label) in generated.iter().zip(labels) {
        let pred = text.contains("hypoechoic nodule");
        match (pred, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 { Some(tp as f64 / (tp + fp) as f64) } else { None };
    let recall = tp as f64 / (tp + fnn) as f64;
    Ok((precision, recall))
}

/// Per-scene generation record for `eval.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEvalRecord {
    pub id: usize,
    pub reference: String,
    pub generated: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Corpus aggregates for `eval.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(rename = "BLEU1")]
    pub bleu1: f64,
    #[serde(rename = "BLEU2")]
    pub bleu2: f64,
    #[serde(rename = "BLEU3")]
    pub bleu3: f64,
    #[serde(rename = "BLEU4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE_L")]
    pub rouge_l: f64,
    pub nodule_precision: Option<f64>,
    pub nodule_recall: f64,
    pub retrieval_top1: f64,
    pub retrieval_top1_sq: f64,
    pub exact_match: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<GenEvalRecord>,
    pub summary: EvalSummary,
}
