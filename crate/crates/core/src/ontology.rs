//! Ontology ingestion: OBO 1.2 term stanzas, general-category selection and
//! the multi-hop `is_a` closure that maps every subclass to the categories it
//! descends from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

/// Identifier of the HPO "Phenotypic abnormality" term.
pub const PHENOTYPIC_ABNORMALITY: &str = "HP:0000118";

const SNAPSHOT_MAGIC: &str = "#phenocompose-ontology\tv1";

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate term id {id} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("term {term} references unknown parent {parent}")]
    DanglingParent { term: String, parent: String },
    #[error("category root {0} not found in ontology")]
    RootNotFound(String),
    #[error("category root {0} has no live children")]
    NoCategories(String),
    #[error("is_a cycle detected through {0}")]
    Cycle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OntologyTerm {
    pub id: String,
    pub name: String,
    pub alt_ids: Vec<String>,
    pub synonyms: Vec<String>,
    pub definition: String,
    pub parents: Vec<String>,
    pub obsolete: bool,
}

impl OntologyTerm {
    /// Name, synonyms (file order) and definition joined by single spaces.
    pub fn text(&self) -> String {
        term_text(self)
    }
}

pub fn term_text(term: &OntologyTerm) -> String {
    std::iter::once(term.name.as_str())
        .chain(term.synonyms.iter().map(String::as_str))
        .chain(std::iter::once(term.definition.as_str()))
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A validated set of terms with id and alias lookup.
#[derive(Debug, Clone)]
pub struct Ontology {
    terms: Vec<OntologyTerm>,
    index: HashMap<String, usize>,
    aliases: HashMap<String, String>,
    children: Vec<Vec<usize>>,
}

impl Ontology {
    /// Builds the lookup tables. Every parent must name a term (or alias) in
    /// the same set.
    pub fn from_terms(terms: Vec<OntologyTerm>) -> Result<Self, OntologyError> {
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if index.insert(t.id.clone(), i).is_some() {
                return Err(OntologyError::DuplicateId { id: t.id.clone(), line: 0 });
            }
        }
        let mut aliases = HashMap::new();
        for t in &terms {
            for alt in &t.alt_ids {
                if !index.contains_key(alt) {
                    aliases.insert(alt.clone(), t.id.clone());
                }
            }
        }
        let mut children = vec![Vec::new(); terms.len()];
        for (i, t) in terms.iter().enumerate() {
            for p in &t.parents {
                let resolved = index
                    .get(p)
                    .or_else(|| aliases.get(p).and_then(|a| index.get(a)))
                    .ok_or_else(|| OntologyError::DanglingParent {
                        term: t.id.clone(),
                        parent: p.clone(),
                    })?;
                children[*resolved].push(i);
            }
        }
        Ok(Self { terms, index, aliases, children })
    }

    pub fn parse_obo<R: BufRead>(reader: R) -> Result<Self, OntologyError> {
        Self::from_terms(parse_obo(reader)?)
    }

    pub fn terms(&self) -> &[OntologyTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Resolves a primary id or an `alt_id` alias to the primary id.
    pub fn resolve<'a>(&'a self, id: &'a str) -> Option<&'a str> {
        if self.index.contains_key(id) {
            Some(id)
        } else {
            self.aliases.get(id).map(String::as_str)
        }
    }

    pub fn get(&self, id: &str) -> Option<&OntologyTerm> {
        self.resolve(id).and_then(|id| self.index.get(id)).map(|&i| &self.terms[i])
    }

    fn position(&self, id: &str) -> Option<usize> {
        self.resolve(id).and_then(|id| self.index.get(id)).copied()
    }

    fn children_of(&self, i: usize) -> &[usize] {
        &self.children[i]
    }
}

// ---------------------------------------------------------------------------
// OBO reading / writing
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Stanza {
    start_line: usize,
    id: Option<String>,
    name: Option<String>,
    term: OntologyTerm,
}

/// Parses `[Term]` stanzas from an OBO 1.2 stream. Header lines and other
/// stanza types are skipped. Unknown keys are ignored.
pub fn parse_obo<R: BufRead>(reader: R) -> Result<Vec<OntologyTerm>, OntologyError> {
    let mut terms = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut current: Option<Stanza> = None;
    let mut in_term = false;

    let finish = |stanza: Stanza,
                  terms: &mut Vec<OntologyTerm>,
                  seen: &mut HashMap<String, usize>|
     -> Result<(), OntologyError> {
        let line = stanza.start_line;
        let id = stanza.id.ok_or(OntologyError::Parse {
            line,
            message: "term stanza without id".into(),
        })?;
        let mut term = stanza.term;
        match stanza.name {
            Some(n) => term.name = n,
            None if term.obsolete => {}
            None => {
                return Err(OntologyError::Parse {
                    line,
                    message: format!("term {id} has no name"),
                })
            }
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(OntologyError::DuplicateId { id, line });
        }
        term.id = id;
        terms.push(term);
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('!') {
            continue;
        }
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            if let Some(stanza) = current.take() {
                finish(stanza, &mut terms, &mut seen)?;
            }
            in_term = trimmed == "[Term]";
            if in_term {
                current = Some(Stanza { start_line: lineno, ..Default::default() });
            }
            continue;
        }
        let Some(stanza) = current.as_mut().filter(|_| in_term) else {
            continue;
        };
        let Some((key, value)) = trimmed.split_once(':') else {
            return Err(OntologyError::Parse {
                line: lineno,
                message: format!("expected `key: value`, found {trimmed:?}"),
            });
        };
        let value = value.trim();
        let parse_err = |message: &str| OntologyError::Parse {
            line: lineno,
            message: format!("{key}: {message}"),
        };
        match key.trim() {
            "id" => stanza.id = Some(strip_comment(value).to_string()),
            "name" => stanza.name = Some(value.to_string()),
            "alt_id" => stanza.term.alt_ids.push(strip_comment(value).to_string()),
            "synonym" => stanza
                .term
                .synonyms
                .push(unquote(value).ok_or_else(|| parse_err("unterminated quoted string"))?),
            "def" => {
                stanza.term.definition =
                    unquote(value).ok_or_else(|| parse_err("unterminated quoted string"))?
            }
            "is_a" => stanza.term.parents.push(strip_comment(value).to_string()),
            "is_obsolete" => stanza.term.obsolete = value == "true",
            _ => {}
        }
    }
    if let Some(stanza) = current.take() {
        finish(stanza, &mut terms, &mut seen)?;
    }
    Ok(terms)
}

fn strip_comment(value: &str) -> &str {
    let value = value.split('!').next().unwrap_or("").trim();
    // trailing qualifier blocks like `{source="..."}`
    value.split_whitespace().next().unwrap_or("")
}

/// Extracts the leading quoted string, dropping trailing scope and
/// provenance brackets.
fn unquote(value: &str) -> Option<String> {
    let rest = value.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next()? {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                other => out.push(other),
            },
            '"' => return Some(out),
            c => out.push(c),
        }
    }
    None
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Canonical OBO writer. Reading the output back yields the same terms.
pub fn write_obo<W: Write>(terms: &[OntologyTerm], mut out: W) -> std::io::Result<()> {
    writeln!(out, "format-version: 1.2")?;
    for t in terms {
        writeln!(out)?;
        writeln!(out, "[Term]")?;
        writeln!(out, "id: {}", t.id)?;
        if !t.name.is_empty() || !t.obsolete {
            writeln!(out, "name: {}", t.name)?;
        }
        for alt in &t.alt_ids {
            writeln!(out, "alt_id: {alt}")?;
        }
        if !t.definition.is_empty() {
            writeln!(out, "def: {} []", quote(&t.definition))?;
        }
        for s in &t.synonyms {
            writeln!(out, "synonym: {} EXACT []", quote(s))?;
        }
        for p in &t.parents {
            writeln!(out, "is_a: {p}")?;
        }
        if t.obsolete {
            writeln!(out, "is_obsolete: true")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Snapshot: one term per line, tab-separated, list fields joined by `|`.
//   id  name  alt_ids  synonyms  definition  parents  obsolete(0|1)
// ---------------------------------------------------------------------------

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '|' => out.push_str("\\p"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            out.push(match chars.next()? {
                '\\' => '\\',
                't' => '\t',
                'n' => '\n',
                'r' => '\r',
                'p' => '|',
                _ => return None,
            });
        } else {
            out.push(c);
        }
    }
    Some(out)
}

fn join_list(items: &[String]) -> String {
    items.iter().map(|s| escape_field(s)).collect::<Vec<_>>().join("|")
}

fn split_list(field: &str) -> Option<Vec<String>> {
    if field.is_empty() {
        return Some(Vec::new());
    }
    field.split('|').map(unescape_field).collect()
}

pub fn write_snapshot<W: Write>(terms: &[OntologyTerm], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SNAPSHOT_MAGIC}")?;
    for t in terms {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            escape_field(&t.id),
            escape_field(&t.name),
            join_list(&t.alt_ids),
            join_list(&t.synonyms),
            escape_field(&t.definition),
            join_list(&t.parents),
            u8::from(t.obsolete)
        )?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(reader: R) -> Result<Vec<OntologyTerm>, OntologyError> {
    let mut terms = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if lineno == 1 {
            if line != SNAPSHOT_MAGIC {
                return Err(OntologyError::Parse {
                    line: 1,
                    message: "not an ontology snapshot".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| OntologyError::Parse { line: lineno, message: message.into() };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(bad("expected 7 tab-separated fields"));
        }
        let term = OntologyTerm {
            id: unescape_field(fields[0]).ok_or_else(|| bad("bad escape"))?,
            name: unescape_field(fields[1]).ok_or_else(|| bad("bad escape"))?,
            alt_ids: split_list(fields[2]).ok_or_else(|| bad("bad escape"))?,
            synonyms: split_list(fields[3]).ok_or_else(|| bad("bad escape"))?,
            definition: unescape_field(fields[4]).ok_or_else(|| bad("bad escape"))?,
            parents: split_list(fields[5]).ok_or_else(|| bad("bad escape"))?,
            obsolete: match fields[6] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("obsolete flag must be 0 or 1")),
            },
        };
        if seen.insert(term.id.clone(), lineno).is_some() {
            return Err(OntologyError::DuplicateId { id: term.id, line: lineno });
        }
        terms.push(term);
    }
    Ok(terms)
}

/// Loads either an OBO file or a snapshot, sniffing the first line.
pub fn load_ontology(path: &std::path::Path) -> Result<Ontology, OntologyError> {
    let text = std::fs::read_to_string(path)?;
    let terms = if text.starts_with(SNAPSHOT_MAGIC) {
        read_snapshot(text.as_bytes())?
    } else {
        parse_obo(text.as_bytes())?
    };
    Ontology::from_terms(terms)
}

// ---------------------------------------------------------------------------
// Categories and closure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhenotypeCategories {
    pub root_id: String,
    /// Category term ids; position is the class index.
    pub categories: Vec<String>,
    /// Term id -> indices of every category it descends from (or is).
    pub closure: BTreeMap<String, BTreeSet<usize>>,
}

impl PhenotypeCategories {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == id)
    }

    pub fn membership(&self, id: &str) -> Option<&BTreeSet<usize>> {
        self.closure.get(id)
    }

    /// Number of closure entries that are not categories themselves.
    pub fn subclass_count(&self) -> usize {
        self.closure.keys().filter(|k| self.index_of(k).is_none()).count()
    }

    /// Subclass ids in identifier order.
    pub fn subclasses(&self) -> impl Iterator<Item = (&String, &BTreeSet<usize>)> {
        self.closure.iter().filter(|(k, _)| self.index_of(k).is_none())
    }

    pub fn category_ids(&self, indices: &BTreeSet<usize>) -> Vec<String> {
        indices.iter().filter_map(|&i| self.categories.get(i).cloned()).collect()
    }
}

pub fn select_general_categories(
    ontology: &Ontology,
    root_id: &str,
) -> Result<PhenotypeCategories, OntologyError> {
    let root = ontology
        .position(root_id)
        .ok_or_else(|| OntologyError::RootNotFound(root_id.to_string()))?;
    let mut categories: Vec<String> = ontology
        .children_of(root)
        .iter()
        .map(|&c| &ontology.terms[c])
        .filter(|t| !t.obsolete)
        .map(|t| t.id.clone())
        .collect();
    categories.sort();
    categories.dedup();
    if categories.is_empty() {
        return Err(OntologyError::NoCategories(root_id.to_string()));
    }
    let closure = categories
        .iter()
        .enumerate()
        .map(|(j, id)| (id.clone(), BTreeSet::from([j])))
        .collect();
    Ok(PhenotypeCategories { root_id: ontology.terms[root].id.clone(), categories, closure })
}

/// Fails with the id of a term on an `is_a` cycle, if any.
pub fn check_acyclic(ontology: &Ontology) -> Result<(), OntologyError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = ontology.len();
    let mut marks = vec![Mark::New; n];
    for start in 0..n {
        if marks[start] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        marks[start] = Mark::Active;
        while let Some((node, next)) = stack.last_mut() {
            let children = ontology.children_of(*node);
            if *next < children.len() {
                let child = children[*next];
                *next += 1;
                match marks[child] {
                    Mark::Active => return Err(OntologyError::Cycle(ontology.terms[child].id.clone())),
                    Mark::New => {
                        marks[child] = Mark::Active;
                        stack.push((child, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                marks[*node] = Mark::Done;
                stack.pop();
            }
        }
    }
    Ok(())
}

/// Populates `closure` with every live term reachable downward from each
/// category.
pub fn subclass_closure(
    ontology: &Ontology,
    mut categories: PhenotypeCategories,
) -> Result<PhenotypeCategories, OntologyError> {
    check_acyclic(ontology)?;
    let mut closure: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut visited = vec![false; ontology.len()];
    for (j, cat) in categories.categories.iter().enumerate() {
        let Some(start) = ontology.position(cat) else {
            return Err(OntologyError::RootNotFound(cat.clone()));
        };
        visited.iter_mut().for_each(|v| *v = false);
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(node) = stack.pop() {
            let term = &ontology.terms[node];
            if term.obsolete {
                continue;
            }
            closure.entry(term.id.clone()).or_default().insert(j);
            for &child in ontology.children_of(node) {
                if !visited[child] {
                    visited[child] = true;
                    stack.push(child);
                }
            }
        }
    }
    categories.closure = closure;
    Ok(categories)
}

/// Parses, selects and closes in one go.
pub fn categories_with_closure(
    ontology: &Ontology,
    root_id: &str,
) -> Result<PhenotypeCategories, OntologyError> {
    subclass_closure(ontology, select_general_categories(ontology, root_id)?)
}
