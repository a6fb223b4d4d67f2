//! Corpus readers: JSON Lines records and MIMIC-III CSV exports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct IcdCode {
    /// First three characters, dots removed, uppercased.
    pub code: String,
    /// V (supplementary) and E (external cause) codes.
    pub supplementary: bool,
}

/// Truncates an ICD-9 code to its three-character category. Returns `None`
/// for strings that are not ICD-9 shaped.
pub fn truncate_icd9(raw: &str) -> Option<IcdCode> {
    let cleaned: String = raw.trim().chars().filter(|&c| c != '.').collect::<String>().to_uppercase();
    let mut chars = cleaned.chars();
    let first = chars.next()?;
    if !(first.is_ascii_digit() || first == 'V' || first == 'E') {
        return None;
    }
    if !chars.clone().all(|c| c.is_ascii_digit()) || cleaned.len() < 3 {
        return None;
    }
    Some(IcdCode { code: cleaned[..3].to_string(), supplementary: !first.is_ascii_digit() })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub documents: usize,
    pub icd_codes: usize,
    /// V/E codes, truncated like the others but counted separately.
    pub supplementary_codes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    doc_id: String,
    text: String,
    #[serde(default)]
    icd9: Vec<String>,
}

fn normalize_codes(raw: &[String], report: &mut LoadReport) -> Option<Vec<String>> {
    let mut codes = BTreeSet::new();
    for r in raw {
        let c = truncate_icd9(r)?;
        report.icd_codes += 1;
        report.supplementary_codes += usize::from(c.supplementary);
        codes.insert(c.code);
    }
    Some(codes.into_iter().collect())
}

/// Reads `{doc_id, text, icd9}` records, one per line.
pub fn load_jsonl<R: BufRead>(reader: R, source: &str) -> Result<(Vec<Document>, LoadReport), CorpusError> {
    let mut docs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CorpusError::Format { path: source.to_string(), line: i + 1, message };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let codes = normalize_codes(&rec.icd9, &mut report)
            .ok_or_else(|| err(format!("malformed ICD-9 code in {:?}", rec.icd9)))?;
        docs.push(Document::ehr(rec.doc_id, rec.text, codes));
    }
    report.documents = docs.len();
    Ok((docs, report))
}

pub fn write_jsonl<W: Write>(docs: &[Document], mut out: W) -> std::io::Result<()> {
    for d in docs {
        let rec = JsonRecord { doc_id: d.doc_id.clone(), text: d.text.clone(), icd9: d.icd_codes.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        writeln!(out)?;
    }
    Ok(())
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, CorpusError> {
    headers.iter().position(|h| h.eq_ignore_ascii_case(name)).ok_or_else(|| CorpusError::Format {
        path: path.display().to_string(),
        line: 1,
        message: format!("missing column {name}"),
    })
}

/// Joins MIMIC-III `NOTEEVENTS` discharge summaries with `DIAGNOSES_ICD`
/// codes on `HADM_ID`. The note's `ROW_ID` becomes the document id.
pub fn load_mimic(notes: &Path, diagnoses: &Path) -> Result<(Vec<Document>, LoadReport), CorpusError> {
    let mut report = LoadReport::default();
    let mut codes_by_admission: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(diagnoses)?;
    let headers = rdr.headers()?.clone();
    let (hadm, icd) = (column(&headers, "HADM_ID", diagnoses)?, column(&headers, "ICD9_CODE", diagnoses)?);
    for rec in rdr.records() {
        let rec = rec?;
        let code = rec.get(icd).unwrap_or("");
        if code.is_empty() {
            continue;
        }
        codes_by_admission.entry(rec.get(hadm).unwrap_or("").to_string()).or_default().push(code.to_string());
    }

    let mut docs = Vec::new();
    let mut rdr = csv::Reader::from_path(notes)?;
    let headers = rdr.headers()?.clone();
    let row_id = column(&headers, "ROW_ID", notes)?;
    let hadm = column(&headers, "HADM_ID", notes)?;
    let category = column(&headers, "CATEGORY", notes)?;
    let text = column(&headers, "TEXT", notes)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if !rec.get(category).unwrap_or("").eq_ignore_ascii_case("Discharge summary") {
            continue;
        }
        let raw = codes_by_admission.get(rec.get(hadm).unwrap_or("")).cloned().unwrap_or_default();
        let codes = normalize_codes(&raw, &mut report).ok_or_else(|| CorpusError::Format {
            path: diagnoses.display().to_string(),
            line: i + 2,
            message: format!("malformed ICD-9 code in {raw:?}"),
        })?;
        docs.push(Document::ehr(rec.get(row_id).unwrap_or(""), rec.get(text).unwrap_or(""), codes));
    }
    report.documents = docs.len();
    Ok((docs, report))
}
