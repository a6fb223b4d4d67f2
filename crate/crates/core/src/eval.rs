//! Per-document precision / recall / F1 against silver labels, and corpus
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use crate::corpus::Document;
use crate::silver::KeywordMatcher;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Empty predictions score zero precision. Callers skip empty silver sets.
pub fn score_document(predicted: &BTreeSet<usize>, silver: &BTreeSet<usize>) -> Scores {
    let hits = predicted.intersection(silver).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let recall = if silver.is_empty() { 0.0 } else { hits / silver.len() as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Scores { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentScore {
    pub doc_id: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_document: Vec<DocumentScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub scored: usize,
    /// Documents whose silver set was empty.
    pub skipped: usize,
    /// Globally pooled counts across all scored documents, for comparison
    /// tables only.
    pub pooled: Scores,
}

/// Example-based evaluation: score every document with a non-empty silver
/// set, then take unweighted means. A labeled document without a prediction
/// counts as an empty prediction.
pub fn evaluate(
    predictions: &BTreeMap<String, BTreeSet<usize>>,
    silver: &BTreeMap<String, BTreeSet<usize>>,
) -> EvalReport {
    let empty = BTreeSet::new();
    let mut per_document = Vec::new();
    let mut skipped = 0;
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (doc_id, gold) in silver {
        if gold.is_empty() {
            skipped += 1;
            continue;
        }
        let pred = predictions.get(doc_id).unwrap_or(&empty);
        tp += pred.intersection(gold).count();
        n_pred += pred.len();
        n_gold += gold.len();
        per_document.push(DocumentScore { doc_id: doc_id.clone(), scores: score_document(pred, gold) });
    }
    let n = per_document.len();
    let mean = |f: fn(&Scores) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_document.iter().map(|d| f(&d.scores)).sum::<f64>() / n as f64
        }
    };
    let pooled_p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let pooled_r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let pooled_f = if pooled_p + pooled_r == 0.0 { 0.0 } else { 2.0 * pooled_p * pooled_r / (pooled_p + pooled_r) };
    EvalReport {
        mean_precision: mean(|s| s.precision),
        mean_recall: mean(|s| s.recall),
        mean_f1: mean(|s| s.f1),
        per_document,
        scored: n,
        skipped,
        pooled: Scores { precision: pooled_p, recall: pooled_r, f1: pooled_f },
    }
}

impl EvalReport {
    /// `doc_id precision recall f1` rows followed by a `#mean` row.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "doc_id\tprecision\trecall\tf1")?;
        for d in &self.per_document {
            writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", d.doc_id, d.scores.precision, d.scores.recall, d.scores.f1)?;
        }
        writeln!(out, "#mean\t{:.6}\t{:.6}\t{:.6}", self.mean_precision, self.mean_recall, self.mean_f1)?;
        writeln!(
            out,
            "#pooled\t{:.6}\t{:.6}\t{:.6}",
            self.pooled.precision, self.pooled.recall, self.pooled.f1
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "documents scored: {}  skipped (empty silver): {}", self.scored, self.skipped)?;
        writeln!(f, "{:<28} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1")?;
        writeln!(
            f,
            "{:<28} {:>9.4} {:>9.4} {:>9.4}",
            "mean over documents", self.mean_precision, self.mean_recall, self.mean_f1
        )?;
        write!(
            f,
            "{:<28} {:>9.4} {:>9.4} {:>9.4}",
            "pooled counts (reference)", self.pooled.precision, self.pooled.recall, self.pooled.f1
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusStats {
    pub documents: usize,
    pub mean_icd_per_document: f64,
    pub mean_matched_terms_per_document: f64,
    /// ICD code -> (min, max) matched-term count over documents carrying it.
    pub per_code_range: BTreeMap<String, (usize, usize)>,
}

pub fn corpus_stats(documents: &[Document], matcher: &KeywordMatcher) -> CorpusStats {
    let counts: Vec<usize> = documents.iter().map(|d| matcher.matched_terms(&d.text).len()).collect();
    corpus_stats_from_counts(documents, &counts)
}

/// Same as [`corpus_stats`] with per-document matched-term counts supplied.
pub fn corpus_stats_from_counts(documents: &[Document], matched: &[usize]) -> CorpusStats {
    if documents.is_empty() {
        return CorpusStats::default();
    }
    let n = documents.len() as f64;
    let mut per_code_range: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (doc, &m) in documents.iter().zip(matched) {
        for code in &doc.icd_codes {
            let e = per_code_range.entry(code.clone()).or_insert((m, m));
            e.0 = e.0.min(m);
            e.1 = e.1.max(m);
        }
    }
    CorpusStats {
        documents: documents.len(),
        mean_icd_per_document: documents.iter().map(|d| d.icd_codes.len()).sum::<usize>() as f64 / n,
        mean_matched_terms_per_document: matched.iter().sum::<usize>() as f64 / n,
        per_code_range,
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "documents: {}", self.documents)?;
        writeln!(f, "mean ICD codes per document: {:.2}", self.mean_icd_per_document)?;
        writeln!(f, "mean keyword-matched terms per document: {:.2}", self.mean_matched_terms_per_document)?;
        writeln!(f, "code\tmin_terms\tmax_terms")?;
        for (code, (lo, hi)) in &self.per_code_range {
            writeln!(f, "{code}\t{lo}\t{hi}")?;
        }
        Ok(())
    }
}
