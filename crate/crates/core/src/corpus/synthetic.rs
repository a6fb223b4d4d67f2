//! Synthetic ontology and note generator for desk-scale runs.
//!
//! Each category owns a private lexicon of pseudo-words. Subclass terms are
//! named from their category's lexicon (a few get a second parent under
//! another category), and each note mixes neutral clinical filler with one
//! to three mentions of subclass terms. A mention is either the exact term
//! name, an exact synonym, or a loose paraphrase built from the term's
//! vocabulary, which exact-match annotators cannot see. The union of the
//! injected terms' category memberships is recorded as ground truth, and
//! ICD-9 / OMIM mapping tables are emitted so the silver-standard chain
//! reproduces that truth.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_tokenize, Document};
use crate::ontology::{OntologyTerm, PHENOTYPIC_ABNORMALITY};

const CATEGORY_NAMES: [&str; 24] = [
    "Abnormality of the eye",
    "Abnormality of the nervous system",
    "Abnormality of the cardiovascular system",
    "Abnormality of blood and blood-forming tissues",
    "Abnormality of the respiratory system",
    "Abnormality of the digestive system",
    "Abnormality of the musculoskeletal system",
    "Abnormality of the integument",
    "Abnormality of the genitourinary system",
    "Abnormality of metabolism/homeostasis",
    "Abnormality of the immune system",
    "Abnormality of the endocrine system",
    "Abnormality of head or neck",
    "Abnormality of limbs",
    "Abnormality of the ear",
    "Abnormality of the breast",
    "Abnormality of the voice",
    "Abnormality of prenatal development or birth",
    "Growth abnormality",
    "Abnormality of the thoracic cavity",
    "Neoplasm",
    "Constitutional symptom",
    "Abnormal cellular phenotype",
    "Abnormality of connective tissue",
];

const FILLER: [&str; 96] = [
    "patient", "was", "admitted", "with", "history", "of", "the", "and", "to", "on", "day", "given",
    "noted", "found", "stable", "discharge", "follow", "plan", "hospital", "course", "he", "she",
    "her", "his", "reports", "denies", "initially", "transferred", "floor", "team", "continued",
    "started", "home", "medications", "per", "family", "seen", "by", "service", "overnight", "labs",
    "were", "within", "normal", "limits", "tolerated", "diet", "ambulating", "independently",
    "prior", "admission", "presented", "emergency", "department", "after", "evaluation", "further",
    "workup", "recommended", "outpatient", "clinic", "appointment", "scheduled", "instructions",
    "reviewed", "understanding", "verbalized", "vital", "signs", "remained", "afebrile", "comfortable",
    "resting", "bed", "monitoring", "repeat", "study", "showed", "no", "acute", "change", "agreed",
    "consulted", "regarding", "management", "condition", "improved", "will", "need", "close",
    "observation", "weeks", "visit", "primary", "care", "provider",
];

const MODIFIERS: [&str; 10] = [
    "abnormal", "increased", "decreased", "mild", "severe", "chronic", "progressive", "recurrent",
    "absent", "episodic",
];

const FUNCTION_WORDS: [&str; 8] = ["of", "the", "with", "in", "a", "and", "or", "by"];

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "st", "tr",
];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
const CODAS: [&str; 6] = ["", "n", "r", "s", "l", "x"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub notes: usize,
    pub categories: usize,
    pub subclasses_per_category: usize,
    pub lexicon_per_category: usize,
    /// Probability that a subclass gets a second parent under another category.
    pub multi_parent_rate: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub max_mentions: usize,
    /// Mention-mode mix; the remainder are paraphrases.
    pub name_rate: f64,
    pub synonym_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            notes: 500,
            categories: 6,
            subclasses_per_category: 40,
            lexicon_per_category: 30,
            multi_parent_rate: 0.08,
            min_sentences: 5,
            max_sentences: 9,
            max_mentions: 3,
            name_rate: 0.25,
            synonym_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionMode {
    Name,
    Synonym,
    Paraphrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub term_id: String,
    pub mode: MentionMode,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub terms: Vec<OntologyTerm>,
    pub category_ids: Vec<String>,
    pub notes: Vec<Document>,
    /// Injected category indices per note, keyed by doc id.
    pub truth: BTreeMap<String, BTreeSet<usize>>,
    pub mentions: BTreeMap<String, Vec<Mention>>,
    pub icd_to_omim: Vec<(String, String)>,
    pub omim_to_hpo: Vec<(String, String)>,
}

impl SyntheticCorpus {
    pub fn truth_ids(&self, doc_id: &str) -> Vec<String> {
        self.truth
            .get(doc_id)
            .map(|s| s.iter().map(|&j| self.category_ids[j].clone()).collect())
            .unwrap_or_default()
    }
}

struct TermInfo {
    id: String,
    category: usize,
    members: BTreeSet<usize>,
    name: String,
    synonyms: Vec<String>,
    content: Vec<String>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}{}",
                ONSETS.choose(rng).unwrap(),
                NUCLEI.choose(rng).unwrap(),
                CODAS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    assert!(
        (1..=CATEGORY_NAMES.len()).contains(&config.categories),
        "between 1 and {} categories",
        CATEGORY_NAMES.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.categories;

    let mut reserved: HashSet<String> = FILLER
        .iter()
        .chain(MODIFIERS.iter())
        .chain(FUNCTION_WORDS.iter())
        .map(|s| s.to_string())
        .collect();
    for name in CATEGORY_NAMES {
        reserved.extend(normalize_tokenize(name));
    }
    let mut lexicons: Vec<Vec<String>> = Vec::with_capacity(m);
    for _ in 0..m {
        let mut lex = Vec::with_capacity(config.lexicon_per_category);
        while lex.len() < config.lexicon_per_category {
            let w = pseudo_word(&mut rng);
            if reserved.insert(w.clone()) {
                lex.push(w);
            }
        }
        lexicons.push(lex);
    }

    let mut terms = vec![
        OntologyTerm { id: "HP:0000001".into(), name: "All".into(), ..Default::default() },
        OntologyTerm {
            id: PHENOTYPIC_ABNORMALITY.into(),
            name: "Phenotypic abnormality".into(),
            definition: "A phenotypic abnormality.".into(),
            parents: vec!["HP:0000001".into()],
            ..Default::default()
        },
    ];
    let category_ids: Vec<String> = (0..m).map(|j| format!("HP:9{:02}0000", j + 1)).collect();
    for (j, id) in category_ids.iter().enumerate() {
        let lex = &lexicons[j];
        let definition = format!(
            "Any abnormality involving {} or {}.",
            lex.choose(&mut rng).unwrap(),
            lex.choose(&mut rng).unwrap()
        );
        terms.push(OntologyTerm {
            id: id.clone(),
            name: CATEGORY_NAMES[j].into(),
            definition,
            parents: vec![PHENOTYPIC_ABNORMALITY.into()],
            ..Default::default()
        });
    }

    let mut infos: Vec<TermInfo> = Vec::new();
    let mut names_seen = HashSet::new();
    for j in 0..m {
        let first_of_category = infos.len();
        for k in 0..config.subclasses_per_category {
            let lex = &lexicons[j];
            let id = format!("HP:9{:02}{:04}", j + 1, k + 1);
            let (name_words, name) = loop {
                let w: Vec<String> = lex.choose_multiple(&mut rng, 2).cloned().collect();
                let modifier = MODIFIERS.choose(&mut rng).unwrap();
                let name = format!("{} {} {}", capitalize(modifier), w[0], w[1]);
                if names_seen.insert(name.clone()) {
                    break (w, name);
                }
            };
            let synonyms: Vec<String> = (0..rng.random_range(0..=2))
                .map(|_| {
                    let w: Vec<&String> = lex.choose_multiple(&mut rng, 2).collect();
                    format!("{} {}", w[0], w[1])
                })
                .collect();
            let mut content = name_words.clone();
            for s in &synonyms {
                content.extend(s.split(' ').map(str::to_string));
            }
            let mut def_words: Vec<String> = content.choose_multiple(&mut rng, 2).cloned().collect();
            def_words.extend(lex.choose_multiple(&mut rng, 2).cloned());
            let mut definition = vec!["A".to_string()];
            for w in def_words {
                definition.push(w);
                definition.push(FUNCTION_WORDS.choose(&mut rng).unwrap().to_string());
            }
            definition.push(FILLER.choose(&mut rng).unwrap().to_string());
            let definition = definition.join(" ") + ".";

            let mut parents = Vec::new();
            let mut members = BTreeSet::from([j]);
            let same: Vec<usize> = (first_of_category..infos.len()).collect();
            if k < 4 || rng.random_bool(0.4) || same.is_empty() {
                parents.push(category_ids[j].clone());
            } else {
                let p = *same.choose(&mut rng).unwrap();
                parents.push(infos[p].id.clone());
                members.extend(infos[p].members.iter().copied());
            }
            if m > 1 && rng.random_bool(config.multi_parent_rate) {
                let foreign: Vec<usize> =
                    (0..first_of_category).filter(|&p| infos[p].category != j).collect();
                if !foreign.is_empty() && rng.random_bool(0.5) {
                    let p = *foreign.choose(&mut rng).unwrap();
                    parents.push(infos[p].id.clone());
                    members.extend(infos[p].members.iter().copied());
                } else {
                    let other = loop {
                        let o = rng.random_range(0..m);
                        if o != j {
                            break o;
                        }
                    };
                    parents.push(category_ids[other].clone());
                    members.insert(other);
                }
            }
            terms.push(OntologyTerm {
                id: id.clone(),
                name: name.clone(),
                synonyms: synonyms.clone(),
                definition,
                parents,
                ..Default::default()
            });
            infos.push(TermInfo { id, category: j, members, name, synonyms, content });
        }
    }

    let by_category: Vec<Vec<usize>> = (0..m)
        .map(|j| (0..infos.len()).filter(|&i| infos[i].members.contains(&j)).collect())
        .collect();

    // ICD-9 codes: two per category, each linked to one OMIM entry that is
    // annotated with the category term itself.
    let mut icd_codes: Vec<Vec<String>> = Vec::with_capacity(m);
    let mut icd_to_omim = Vec::new();
    let mut omim_to_hpo = Vec::new();
    for (j, cat) in category_ids.iter().enumerate() {
        let mut codes = Vec::new();
        for c in 0..2 {
            let code = format!("{}", 100 + 7 * j + c);
            let omim = format!("OMIM:{}", 600_000 + 10 * j + c);
            icd_to_omim.push((code.clone(), omim.clone()));
            omim_to_hpo.push((omim, cat.clone()));
            codes.push(code);
        }
        icd_codes.push(codes);
    }

    let mut notes = Vec::with_capacity(config.notes);
    let mut truth = BTreeMap::new();
    let mut all_mentions = BTreeMap::new();
    let width = config.notes.max(1).to_string().len();
    for n in 0..config.notes {
        let doc_id = format!("note-{n:0width$}");
        let n_mentions = rng.random_range(1..=config.max_mentions.clamp(1, m));
        let mut chosen: Vec<usize> = (0..m).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_mentions);

        let mut labels = BTreeSet::new();
        let mut mentions = Vec::new();
        for &j in &chosen {
            let info = &infos[*by_category[j].choose(&mut rng).unwrap()];
            labels.extend(info.members.iter().copied());
            let roll: f64 = rng.random();
            let (mode, text) = if roll < config.name_rate {
                (MentionMode::Name, info.name.to_lowercase())
            } else if roll < config.name_rate + config.synonym_rate && !info.synonyms.is_empty() {
                (MentionMode::Synonym, info.synonyms.choose(&mut rng).unwrap().clone())
            } else {
                (MentionMode::Paraphrase, paraphrase(info, &lexicons[info.category], &mut rng))
            };
            mentions.push(Mention { term_id: info.id.clone(), mode, text });
        }

        let n_sentences = rng.random_range(config.min_sentences..=config.max_sentences.max(config.min_sentences));
        let mut sentences: Vec<String> = (0..n_sentences).map(|_| filler_sentence(&mut rng)).collect();
        for mention in &mentions {
            let at = rng.random_range(0..=sentences.len());
            let lead = ["Exam notable for", "She has", "He has", "Findings of", "Consistent with", "Known"]
                .choose(&mut rng)
                .unwrap();
            sentences.insert(at, format!("{lead} {}.", mention.text));
        }
        let text = sentences.join(" ");

        let mut codes: Vec<String> = labels
            .iter()
            .map(|&j| {
                let code = icd_codes[j].choose(&mut rng).unwrap().clone();
                if rng.random_bool(0.5) {
                    format!("{code}.{}", rng.random_range(0..10))
                } else {
                    code
                }
            })
            .collect();
        codes.sort();
        notes.push(Document::ehr(doc_id.clone(), text, codes));
        truth.insert(doc_id.clone(), labels);
        all_mentions.insert(doc_id, mentions);
    }

    SyntheticCorpus { terms, category_ids, notes, truth, mentions: all_mentions, icd_to_omim, omim_to_hpo }
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(6..=12);
    let mut words: Vec<String> = (0..len).map(|_| FILLER.choose(rng).unwrap().to_string()).collect();
    match rng.random_range(0..6) {
        0 => words.push(format!("bp {}/{}", rng.random_range(90..160), rng.random_range(50..100))),
        1 => words.insert(0, "[**Hospital 1234**]".into()),
        2 => words.push(format!("day {}", rng.random_range(1..10))),
        _ => {}
    }
    capitalize(&words.join(" ")) + "."
}

/// Four to six words drawn from the term's own vocabulary and its category
/// lexicon, never reproducing the name or a synonym verbatim.
fn paraphrase(info: &TermInfo, lexicon: &[String], rng: &mut ChaCha8Rng) -> String {
    let exact: Vec<Vec<String>> = std::iter::once(&info.name)
        .chain(info.synonyms.iter())
        .map(|s| normalize_tokenize(s))
        .collect();
    loop {
        let mut words: Vec<String> = info.content.choose_multiple(rng, 2).cloned().collect();
        let extra = rng.random_range(1..=2);
        words.extend(lexicon.choose_multiple(rng, extra).cloned());
        words.shuffle(rng);
        let mut out = Vec::new();
        for (i, w) in words.into_iter().enumerate() {
            if i > 0 && rng.random_bool(0.5) {
                out.push(FUNCTION_WORDS.choose(rng).unwrap().to_string());
            }
            out.push(w);
        }
        if !exact.iter().any(|e| contains_run(&out, e)) {
            return out.join(" ");
        }
    }
}
