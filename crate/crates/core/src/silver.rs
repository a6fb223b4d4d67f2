//! ICD-9 → OMIM → HPO silver standard, plus the keyword and random baselines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_tokenize, truncate_icd9, Document};
use crate::ontology::{Ontology, PhenotypeCategories};

#[derive(Debug, Error)]
pub enum SilverError {
    #[error("{source_name}:{line}: {message}")]
    Format { source_name: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn normalize_omim(raw: &str) -> Option<String> {
    let digits = raw.trim().strip_prefix("OMIM:").unwrap_or(raw.trim());
    (!digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())).then(|| format!("OMIM:{digits}"))
}

fn normalize_hpo(raw: &str) -> Option<String> {
    let raw = raw.trim();
    let digits = raw.strip_prefix("HP:")?;
    (digits.len() == 7 && digits.chars().all(|c| c.is_ascii_digit())).then(|| raw.to_string())
}

fn read_pairs<R: BufRead>(
    reader: R,
    source_name: &str,
    left: impl Fn(&str) -> Option<String>,
    right: impl Fn(&str) -> Option<String>,
) -> Result<BTreeMap<String, BTreeSet<String>>, SilverError> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| SilverError::Format { source_name: source_name.to_string(), line: i + 1, message };
        let mut fields = line.split('\t');
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(err("expected two tab-separated fields".into()));
        };
        let a = left(a).ok_or_else(|| err(format!("malformed code {a:?}")))?;
        let b = right(b).ok_or_else(|| err(format!("malformed code {b:?}")))?;
        map.entry(a).or_default().insert(b);
    }
    Ok(map)
}

/// Reads `icd9<TAB>omim` lines. ICD codes are truncated to three characters.
pub fn read_icd_to_omim<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<BTreeMap<String, BTreeSet<String>>, SilverError> {
    read_pairs(reader, source_name, |s| truncate_icd9(s).map(|c| c.code), normalize_omim)
}

/// Reads `omim<TAB>hpo` lines.
pub fn read_omim_to_hpo<R: BufRead>(
    reader: R,
    source_name: &str,
) -> Result<BTreeMap<String, BTreeSet<String>>, SilverError> {
    read_pairs(reader, source_name, normalize_omim, normalize_hpo)
}

pub fn write_pairs<W: Write>(pairs: &[(String, String)], mut out: W) -> std::io::Result<()> {
    for (a, b) in pairs {
        writeln!(out, "{a}\t{b}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappingTable {
    pub icd_to_omim: BTreeMap<String, BTreeSet<String>>,
    pub omim_to_hpo: BTreeMap<String, BTreeSet<String>>,
    pub icd_to_categories: BTreeMap<String, BTreeSet<usize>>,
    /// One message per HPO id that could not be placed in the closure.
    pub warnings: Vec<String>,
}

impl MappingTable {
    /// ICD codes whose composed category set is empty.
    pub fn unmapped_codes(&self) -> Vec<&str> {
        self.icd_to_categories.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| k.as_str()).collect()
    }
}

/// Composes the two hops and lifts every HPO term to its categories.
/// HPO ids outside the closure are dropped with a warning.
pub fn compose_mapping(
    icd_to_omim: BTreeMap<String, BTreeSet<String>>,
    omim_to_hpo: BTreeMap<String, BTreeSet<String>>,
    ontology: Option<&Ontology>,
    categories: &PhenotypeCategories,
) -> MappingTable {
    let mut warnings = Vec::new();
    let mut hpo_categories: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for hpo in omim_to_hpo.values().flatten() {
        if hpo_categories.contains_key(hpo.as_str()) {
            continue;
        }
        let resolved = ontology.and_then(|o| o.resolve(hpo)).unwrap_or(hpo);
        match categories.membership(resolved) {
            Some(set) => {
                hpo_categories.insert(hpo, set.clone());
            }
            None => {
                let msg = format!("HPO id {hpo} is not under any general category; dropped");
                log::warn!("{msg}");
                warnings.push(msg);
                hpo_categories.insert(hpo, BTreeSet::new());
            }
        }
    }
    let mut icd_to_categories = BTreeMap::new();
    for (icd, omims) in &icd_to_omim {
        let mut set = BTreeSet::new();
        for omim in omims {
            for hpo in omim_to_hpo.get(omim).into_iter().flatten() {
                set.extend(hpo_categories[hpo.as_str()].iter().copied());
            }
        }
        icd_to_categories.insert(icd.clone(), set);
    }
    MappingTable { icd_to_omim, omim_to_hpo, icd_to_categories, warnings }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SilverLabels {
    pub labels: BTreeMap<String, BTreeSet<usize>>,
    /// Documents with at least one code in the table.
    pub covered: usize,
    /// Documents whose label set came out empty.
    pub empty: usize,
}

pub fn silver_labels(documents: &[Document], table: &MappingTable) -> SilverLabels {
    let mut out = SilverLabels::default();
    for doc in documents {
        let mut set = BTreeSet::new();
        let mut covered = false;
        for code in &doc.icd_codes {
            if let Some(cats) = table.icd_to_categories.get(code) {
                covered = true;
                set.extend(cats.iter().copied());
            }
        }
        out.covered += usize::from(covered);
        out.empty += usize::from(set.is_empty());
        out.labels.insert(doc.doc_id.clone(), set);
    }
    out
}

/// Exact token-run matcher over names and synonyms of every live term in
/// the closure.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    /// First token -> (phrase tokens, term id) candidates.
    phrases: HashMap<String, Vec<(Vec<String>, String)>>,
    membership: BTreeMap<String, BTreeSet<usize>>,
}

impl KeywordMatcher {
    pub fn new(ontology: &Ontology, categories: &PhenotypeCategories) -> Self {
        let mut phrases: HashMap<String, Vec<(Vec<String>, String)>> = HashMap::new();
        for id in categories.closure.keys() {
            let Some(term) = ontology.get(id) else { continue };
            if term.obsolete {
                continue;
            }
            let mut seen = BTreeSet::new();
            for label in std::iter::once(&term.name).chain(term.synonyms.iter()) {
                let tokens = normalize_tokenize(label);
                if tokens.is_empty() || !seen.insert(tokens.clone()) {
                    continue;
                }
                phrases.entry(tokens[0].clone()).or_default().push((tokens, id.clone()));
            }
        }
        Self { phrases, membership: categories.closure.clone() }
    }

    /// Term ids whose name or a synonym occurs as a contiguous token run.
    pub fn matched_terms(&self, text: &str) -> BTreeSet<String> {
        let tokens = normalize_tokenize(text);
        let mut found = BTreeSet::new();
        for (i, tok) in tokens.iter().enumerate() {
            for (phrase, id) in self.phrases.get(tok).into_iter().flatten() {
                if tokens[i..].starts_with(phrase) {
                    found.insert(id.clone());
                }
            }
        }
        found
    }

    pub fn annotate(&self, text: &str) -> BTreeSet<usize> {
        self.matched_terms(text)
            .iter()
            .flat_map(|id| self.membership.get(id).into_iter().flatten().copied())
            .collect()
    }
}

pub fn keyword_annotate(text: &str, ontology: &Ontology, categories: &PhenotypeCategories) -> BTreeSet<usize> {
    KeywordMatcher::new(ontology, categories).annotate(text)
}

/// Includes each of `m` categories independently with probability `rate`.
pub fn random_annotate<R: Rng + ?Sized>(m: usize, rng: &mut R, rate: f64) -> BTreeSet<usize> {
    let rate = rate.clamp(0.0, 1.0);
    (0..m).filter(|_| rng.random_bool(rate)).collect()
}

// ---------------------------------------------------------------------------
// Label files: one JSON record per document, categories as ontology ids.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub doc_id: String,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_path: Option<String>,
}

pub fn write_label_records<W: Write>(records: &[LabelRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_label_records<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<LabelRecord>, SilverError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SilverError::Format {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn labels_to_records(
    labels: &BTreeMap<String, BTreeSet<usize>>,
    categories: &PhenotypeCategories,
) -> Vec<LabelRecord> {
    labels
        .iter()
        .map(|(doc_id, set)| LabelRecord {
            doc_id: doc_id.clone(),
            categories: categories.category_ids(set),
            alpha_path: None,
        })
        .collect()
}

/// Maps record category ids back to indices. Unknown ids are reported in
/// the second return value.
pub fn records_to_labels(
    records: &[LabelRecord],
    categories: &PhenotypeCategories,
) -> (BTreeMap<String, BTreeSet<usize>>, Vec<String>) {
    let mut unknown = Vec::new();
    let labels = records
        .iter()
        .map(|r| {
            let set = r
                .categories
                .iter()
                .filter_map(|id| {
                    let idx = categories.index_of(id);
                    if idx.is_none() {
                        unknown.push(id.clone());
                    }
                    idx
                })
                .collect();
            (r.doc_id.clone(), set)
        })
        .collect();
    (labels, unknown)
}
