//! Sentence-level BLEU and lemma-level BLEU over whitespace tokens.
//!
//! Precision smoothing is pinned to one method so scores are reproducible
//! within this project: any n-gram order with zero matches gets 0.1 added
//! to numerator and denominator. Brevity penalty is exp(1 - r/h) when the
//! hypothesis is shorter than the reference.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_N: usize = 4;

/// Geometric mean of clipped n-gram precisions times the brevity penalty,
/// in [0, 1]. The reference must be non-empty; an empty hypothesis scores 0.
pub fn sentence_bleu(hypothesis: &[&str], reference: &[&str], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedScore("empty reference".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidInput("max_n must be positive".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp_counts = ngram_counts(hypothesis, n);
        let ref_counts = ngram_counts(reference, n);
        let mut matches = 0usize;
        let mut total = 0usize;
        for (gram, &c) in &hyp_counts {
            matches += c.min(*ref_counts.get(gram).unwrap_or(&0));
            total += c;
        }
        let p = if matches == 0 {
            0.1 / (total as f64 + 0.1)
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let h = hypothesis.len() as f64;
    let r = reference.len() as f64;
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Arithmetic mean of sentence scores.
pub fn corpus_average(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to average".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Surface-form to lemma mapping. Lookup is total: the identity map
/// returns words unchanged, and loaded tables fall back to the lowercased
/// surface form for unmapped words.
#[derive(Debug, Clone, Default)]
pub struct LemmaMap {
    table: Option<HashMap<String, String>>,
}

impl LemmaMap {
    pub fn identity() -> Self {
        LemmaMap { table: None }
    }

    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        LemmaMap {
            table: Some(pairs.into_iter().map(|(a, b)| (a.into(), b.into())).collect()),
        }
    }

    /// Two-column TSV: surface TAB lemma.
    pub fn load_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let surface = parts.next().unwrap_or("");
            let lemma = parts.next().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "lemma map line {}: expected two tab-separated columns",
                    lineno + 1
                ))
            })?;
            map.insert(surface.to_string(), lemma.to_string());
        }
        Ok(LemmaMap { table: Some(map) })
    }

    pub fn lemma(&self, word: &str) -> String {
        match &self.table {
            None => word.to_string(),
            Some(map) => match map.get(word) {
                Some(l) => l.clone(),
                None => word.to_lowercase(),
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.table.is_none()
    }
}

/// Map both sides through the lemma map, then score with sentence BLEU.
/// With an empty map and already-lowercased text this equals
/// [`sentence_bleu`] exactly.
pub fn lemma_bleu(
    hypothesis: &[&str],
    reference: &[&str],
    lemmas: &LemmaMap,
    max_n: usize,
) -> Result<f64> {
    let hyp: Vec<String> = hypothesis.iter().map(|w| lemmas.lemma(w)).collect();
    let rf: Vec<String> = reference.iter().map(|w| lemmas.lemma(w)).collect();
    let hyp_refs: Vec<&str> = hyp.iter().map(|s| s.as_str()).collect();
    let ref_refs: Vec<&str> = rf.iter().map(|s| s.as_str()).collect();
    sentence_bleu(&hyp_refs, &ref_refs, max_n)
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}
