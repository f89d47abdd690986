//! Smoothed sentence BLEU-4, MRR, accuracy and a paired one-sided t-test,
//! plus per-language aggregation and table rendering.

mod table;

#[cfg(test)]
mod tests;

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub use table::Table;

use crate::error::{Error, Result};

/// Name of the smoothing scheme recorded in every BLEU report.
pub const BLEU_VARIANT: &str = "bleu4, add-one smoothing on 2..4-gram precisions, brevity penalty exp(1-r/c)";

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level BLEU-4 in `[0, 1]`. Unigram precision is unsmoothed;
/// 2- to 4-gram precisions use `(matches + 1) / (total + 1)`.
pub fn smoothed_bleu4<T: Hash + Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let matches: usize = cand.iter().map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matches as f64 / total as f64
        } else {
            (matches as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// Scores grouped by language; the overall value is the unweighted mean of
/// the per-language means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScores {
    pub per_example: Vec<f64>,
    pub per_language: Vec<(String, f64)>,
    pub overall: f64,
}

impl LanguageScores {
    pub fn aggregate(languages: &[String], scores: Vec<f64>) -> Result<Self> {
        if languages.len() != scores.len() {
            return Err(Error::Invalid(format!("{} languages for {} scores", languages.len(), scores.len())));
        }
        let mut order: Vec<&String> = languages.iter().collect();
        order.sort();
        order.dedup();
        let per_language: Vec<(String, f64)> = order
            .into_iter()
            .map(|lang| {
                let vals: Vec<f64> = scores.iter().zip(languages).filter(|(_, l)| *l == lang).map(|(s, _)| *s).collect();
                (lang.clone(), vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        let overall = if per_language.is_empty() {
            0.0
        } else {
            per_language.iter().map(|(_, v)| v).sum::<f64>() / per_language.len() as f64
        };
        Ok(Self { per_example: scores, per_language, overall })
    }

    pub fn language(&self, name: &str) -> Option<f64> {
        self.per_language.iter().find(|(l, _)| l == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub variant: String,
    /// Mean over all examples, ignoring language.
    pub corpus_mean: f64,
    #[serde(flatten)]
    pub scores: LanguageScores,
}

/// BLEU over `(language, candidate, reference)` triples.
pub fn bleu_report(items: &[(String, Vec<String>, Vec<String>)]) -> Result<BleuReport> {
    let langs: Vec<String> = items.iter().map(|(l, _, _)| l.clone()).collect();
    let scores: Vec<f64> = items.iter().map(|(_, c, r)| smoothed_bleu4(c, r)).collect();
    let corpus_mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(BleuReport { variant: BLEU_VARIANT.into(), corpus_mean, scores: LanguageScores::aggregate(&langs, scores)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrrReport {
    #[serde(flatten)]
    pub scores: LanguageScores,
}

/// Reciprocal rank of `gold` in `ranked` (1-based rank).
pub fn reciprocal_rank<T: PartialEq + std::fmt::Debug>(ranked: &[T], gold: &T) -> Result<f64> {
    ranked
        .iter()
        .position(|c| c == gold)
        .map(|i| 1.0 / (i + 1) as f64)
        .ok_or_else(|| Error::Invalid(format!("gold candidate {gold:?} is missing from its pool")))
}

pub fn mrr<T: PartialEq + std::fmt::Debug>(languages: &[String], ranked: &[Vec<T>], gold: &[T]) -> Result<MrrReport> {
    if ranked.len() != gold.len() {
        return Err(Error::Invalid(format!("{} rankings for {} gold ids", ranked.len(), gold.len())));
    }
    let rr = ranked.iter().zip(gold).map(|(r, g)| reciprocal_rank(r, g)).collect::<Result<Vec<_>>>()?;
    Ok(MrrReport { scores: LanguageScores::aggregate(languages, rr)? })
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// P-value of the one-sided paired t-test with alternative `mean(a - b) > 0`.
/// Zero-variance differences give 0 (positive mean) or 1 (negative mean).
pub fn paired_one_sided_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Invalid(format!("paired t-test needs equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().all(|d| *d == 0.0) {
        return Err(Error::Invalid("paired t-test is undefined when every difference is zero".into()));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(1.0 - dist.cdf(t))
}
