use std::collections::HashMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::{CorpusError, Document};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const DEFAULT_VOCAB_CAP: usize = 30_000;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token inventory. Ids 0 and 1 are PAD and UNK; regular tokens follow in
/// descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(regular: Vec<String>) -> Self {
        let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(regular)
            .collect();
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, token_to_id }
    }

    /// Total size including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(CorpusError::Vocabulary("missing reserved tokens".into()));
        }
        let vocab = Self::from_tokens(lines[2..].to_vec());
        if vocab.token_to_id.len() != vocab.tokens.len() {
            return Err(CorpusError::Vocabulary("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn hash(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Counts tokens over all given documents and keeps the `cap` most frequent.
pub fn build_vocabulary(documents: &[Document], cap: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in documents {
        for t in doc.tokens() {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
}
