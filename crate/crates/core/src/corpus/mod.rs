//! Documents, vocabulary, fixed-width fragments and the train/test split.

mod loader;
pub mod synthetic;
mod tokenize;
mod vocab;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loader::{load_jsonl, load_mimic, truncate_icd9, write_jsonl, IcdCode, LoadReport};
pub use tokenize::{is_numeric_token, normalize_tokenize};
pub use vocab::{build_vocabulary, Vocabulary, DEFAULT_VOCAB_CAP, PAD_ID, UNK_ID};

use crate::ontology::{Ontology, PhenotypeCategories};

pub const DEFAULT_WINDOW: usize = 32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("need at least two documents to split, got {0}")]
    TooFewDocuments(usize),
    #[error("split ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("vocabulary file: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentKind {
    Ehr,
    Category,
    Subclass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub kind: DocumentKind,
    pub text: String,
    /// Three-character ICD-9 codes (EHRs only).
    pub icd_codes: Vec<String>,
    /// Known category membership: singleton for categories, closure set for
    /// subclasses, empty for EHRs.
    pub category_indices: BTreeSet<usize>,
}

impl Document {
    pub fn ehr(doc_id: impl Into<String>, text: impl Into<String>, icd_codes: Vec<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            kind: DocumentKind::Ehr,
            text: text.into(),
            icd_codes,
            category_indices: BTreeSet::new(),
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        normalize_tokenize(&self.text)
    }
}

/// One document per category plus one per subclass in the closure, using
/// name, synonyms and definition as the text.
pub fn ontology_documents(ontology: &Ontology, categories: &PhenotypeCategories) -> Vec<Document> {
    let mut docs = Vec::with_capacity(categories.closure.len());
    for (j, id) in categories.categories.iter().enumerate() {
        if let Some(term) = ontology.get(id) {
            docs.push(Document {
                doc_id: id.clone(),
                kind: DocumentKind::Category,
                text: term.text(),
                icd_codes: Vec::new(),
                category_indices: BTreeSet::from([j]),
            });
        }
    }
    for (id, members) in categories.subclasses() {
        if let Some(term) = ontology.get(id) {
            docs.push(Document {
                doc_id: id.clone(),
                kind: DocumentKind::Subclass,
                text: term.text(),
                icd_codes: Vec::new(),
                category_indices: members.clone(),
            });
        }
    }
    docs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub doc_id: String,
    pub position: usize,
    pub token_ids: Vec<u32>,
    pub true_length: usize,
}

impl Fragment {
    pub fn window(&self) -> usize {
        self.token_ids.len()
    }
}

/// Non-overlapping windows of `window` tokens; the last one is PAD-padded.
/// An empty document yields a single all-PAD fragment.
pub fn fragment_document(doc: &Document, vocab: &Vocabulary, window: usize) -> Vec<Fragment> {
    fragment_tokens(&doc.doc_id, &doc.tokens(), vocab, window)
}

pub fn fragment_tokens(doc_id: &str, tokens: &[String], vocab: &Vocabulary, window: usize) -> Vec<Fragment> {
    assert!(window >= 1, "fragment window must be positive");
    let ids: Vec<u32> = tokens.iter().map(|t| vocab.id_of(t)).collect();
    if ids.is_empty() {
        return vec![Fragment {
            doc_id: doc_id.to_string(),
            position: 0,
            token_ids: vec![PAD_ID; window],
            true_length: 0,
        }];
    }
    ids.chunks(window)
        .enumerate()
        .map(|(position, chunk)| {
            let mut token_ids = chunk.to_vec();
            token_ids.resize(window, PAD_ID);
            Fragment { doc_id: doc_id.to_string(), position, token_ids, true_length: chunk.len() }
        })
        .collect()
}

/// Concatenates the unpadded parts of fragments in position order.
pub fn defragment(fragments: &[Fragment]) -> Vec<u32> {
    let mut sorted: Vec<&Fragment> = fragments.iter().collect();
    sorted.sort_by_key(|f| f.position);
    sorted.iter().flat_map(|f| f.token_ids[..f.true_length].iter().copied()).collect()
}

/// Seeded document-level partition; the training side gets
/// `floor(n * ratio)` documents (clamped so both sides are non-empty).
pub fn split_train_test<T: Clone>(docs: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    if docs.len() < 2 {
        return Err(CorpusError::TooFewDocuments(docs.len()));
    }
    let n_train = ((docs.len() as f64 * ratio).floor() as usize).clamp(1, docs.len() - 1);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| docs[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(test_idx)))
}
