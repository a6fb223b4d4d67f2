//! Per-category threshold calibration and fragment-level annotation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Fragment;
use crate::model::{Model, ModelError};

pub const DEFAULT_PERCENTILE: f64 = 90.0;
pub const PERCENTILE_RANGE: (f64, f64) = (70.0, 95.0);

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("percentile {0} outside [{lo}, {hi}]", lo = PERCENTILE_RANGE.0, hi = PERCENTILE_RANGE.1)]
    Percentile(f64),
    #[error("cannot calibrate on an empty fragment set")]
    EmptyCalibration,
    #[error("thresholds cover {thresholds} categories but the model has {model}")]
    CategoryMismatch { thresholds: usize, model: usize },
    #[error("threshold file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("could not start worker pool: {0}")]
    Workers(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, AnnotateError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub category_ids: Vec<String>,
    pub tau: Vec<f64>,
    pub percentile: f64,
    /// sha256 over the calibration fragments.
    pub calibration_hash: String,
}

impl ThresholdSet {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Header lines `#percentile` and `#calibration_hash`, then one
    /// `id<TAB>tau` line per category.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "#percentile\t{}", self.percentile)?;
        writeln!(out, "#calibration_hash\t{}", self.calibration_hash)?;
        for (id, t) in self.category_ids.iter().zip(&self.tau) {
            writeln!(out, "{id}\t{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut set = ThresholdSet { category_ids: Vec::new(), tau: Vec::new(), percentile: f64::NAN, calibration_hash: String::new() };
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = |message: String| AnnotateError::Format { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once('\t').ok_or_else(|| bad("expected two tab-separated fields".into()))?;
            match key {
                "#percentile" => set.percentile = value.parse().map_err(|_| bad(format!("bad percentile {value:?}")))?,
                "#calibration_hash" => set.calibration_hash = value.to_string(),
                k if k.starts_with('#') => {}
                id => {
                    let t: f64 = value.parse().map_err(|_| bad(format!("bad threshold {value:?}")))?;
                    if !(0.0..=1.0).contains(&t) {
                        return Err(bad(format!("threshold {t} outside [0, 1]")));
                    }
                    set.category_ids.push(id.to_string());
                    set.tau.push(t);
                }
            }
        }
        if set.percentile.is_nan() {
            return Err(AnnotateError::Format { line: 0, message: "missing #percentile header".into() });
        }
        Ok(set)
    }
}

/// Linear-interpolation percentile: rank `p/100 * (n - 1)` into the sorted
/// values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

pub fn check_percentile(p: f64) -> Result<()> {
    if (PERCENTILE_RANGE.0..=PERCENTILE_RANGE.1).contains(&p) {
        Ok(())
    } else {
        Err(AnnotateError::Percentile(p))
    }
}

/// Column-wise percentiles of an alpha matrix (rows are fragments).
pub fn thresholds_from_alpha(rows: &[Vec<f64>], p: f64) -> Result<Vec<f64>> {
    check_percentile(p)?;
    let m = rows.first().ok_or(AnnotateError::EmptyCalibration)?.len();
    Ok((0..m)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            percentile(&col, p).expect("non-empty").clamp(0.0, 1.0)
        })
        .collect())
}

pub fn fragment_hash(fragments: &[Fragment]) -> String {
    let mut h = Sha256::new();
    for f in fragments {
        h.update(f.doc_id.as_bytes());
        h.update([0]);
        h.update((f.position as u64).to_le_bytes());
        for t in &f.token_ids {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn calibrate_thresholds(
    model: &Model,
    fragments: &[Fragment],
    p: f64,
    category_ids: &[String],
    batch_size: usize,
) -> Result<ThresholdSet> {
    check_percentile(p)?;
    if fragments.is_empty() {
        return Err(AnnotateError::EmptyCalibration);
    }
    if category_ids.len() != model.config.num_categories {
        return Err(AnnotateError::CategoryMismatch { thresholds: category_ids.len(), model: model.config.num_categories });
    }
    let refs: Vec<&Fragment> = fragments.iter().collect();
    let rows = model.alpha_rows(&refs, batch_size)?;
    Ok(ThresholdSet {
        category_ids: category_ids.to_vec(),
        tau: thresholds_from_alpha(&rows, p)?,
        percentile: p,
        calibration_hash: fragment_hash(fragments),
    })
}

/// `{ j : alpha_j > tau_j }`.
pub fn threshold_alpha(alpha: &[f64], tau: &[f64]) -> BTreeSet<usize> {
    alpha.iter().zip(tau).enumerate().filter(|(_, (a, t))| a > t).map(|(j, _)| j).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Union of the fragment annotation sets.
    #[default]
    Union,
    /// Threshold the per-category maximum alpha over fragments.
    MaxAlpha,
}

pub fn aggregate(alpha_rows: &[Vec<f64>], tau: &[f64], strategy: Aggregation) -> BTreeSet<usize> {
    match strategy {
        Aggregation::Union => alpha_rows.iter().flat_map(|a| threshold_alpha(a, tau)).collect(),
        Aggregation::MaxAlpha => {
            let max: Vec<f64> = (0..tau.len())
                .map(|j| alpha_rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            threshold_alpha(&max, tau)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationResult {
    pub doc_id: String,
    pub categories: BTreeSet<usize>,
    pub per_fragment_alpha: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateOptions {
    pub strategy: Aggregation,
    pub batch_size: usize,
    pub keep_alpha: bool,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self { strategy: Aggregation::Union, batch_size: 64, keep_alpha: false }
    }
}

fn check_thresholds(model: &Model, thresholds: &ThresholdSet) -> Result<()> {
    if thresholds.len() != model.config.num_categories {
        return Err(AnnotateError::CategoryMismatch { thresholds: thresholds.len(), model: model.config.num_categories });
    }
    Ok(())
}

pub fn annotate_fragment(model: &Model, fragment: &Fragment, thresholds: &ThresholdSet) -> Result<BTreeSet<usize>> {
    check_thresholds(model, thresholds)?;
    Ok(threshold_alpha(&model.encode(fragment)?.alpha, &thresholds.tau))
}

pub fn annotate_document(
    model: &Model,
    doc_id: &str,
    fragments: &[Fragment],
    thresholds: &ThresholdSet,
    options: &AnnotateOptions,
) -> Result<AnnotationResult> {
    check_thresholds(model, thresholds)?;
    let refs: Vec<&Fragment> = fragments.iter().collect();
    let rows = if refs.is_empty() { Vec::new() } else { model.alpha_rows(&refs, options.batch_size)? };
    Ok(AnnotationResult {
        doc_id: doc_id.to_string(),
        categories: aggregate(&rows, &thresholds.tau, options.strategy),
        per_fragment_alpha: options.keep_alpha.then_some(rows),
    })
}

/// Annotates documents (id plus fragments) on `workers` threads. Output
/// order follows the input.
pub fn annotate_documents(
    model: &Model,
    documents: &[(String, Vec<Fragment>)],
    thresholds: &ThresholdSet,
    options: &AnnotateOptions,
    workers: usize,
) -> Result<Vec<AnnotationResult>> {
    check_thresholds(model, thresholds)?;
    let one = |(id, frags): &(String, Vec<Fragment>)| annotate_document(model, id, frags, thresholds, options);
    if workers <= 1 {
        return documents.iter().map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| AnnotateError::Workers(e.to_string()))?;
    pool.install(|| documents.par_iter().map(one).collect())
}

/// `doc_id position alpha_1 .. alpha_M` rows for every result that kept
/// its alpha matrix.
pub fn write_alpha_table<W: Write>(results: &[AnnotationResult], category_ids: &[String], mut out: W) -> std::io::Result<()> {
    writeln!(out, "doc_id\tposition\t{}", category_ids.join("\t"))?;
    for r in results {
        for (i, row) in r.per_fragment_alpha.iter().flatten().enumerate() {
            let cols: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}\t{i}\t{}", r.doc_id, cols.join("\t"))?;
        }
    }
    Ok(())
}
