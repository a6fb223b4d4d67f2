//! Losses and the optimization loop over mixed batches of EHR fragments,
//! category texts and subclass texts.

mod config;
pub mod gradcheck;
mod losses;

use std::collections::VecDeque;
use std::io::Write;
use std::time::{Duration, Instant};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConvergenceRule, ModelPreset, ModelSpec, OptimizerConfig, TrainConfig};
pub use losses::{
    alpha_penalty, batch_losses, prior_per_example, token_cross_entropy, LossTerms, LossValues, PriorScope, EPSILON,
};

use crate::corpus::{fragment_document, Document, DocumentKind, Vocabulary};
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss diverged at step {step}; last finite losses: {last}")]
    Diverged { step: usize, last: String },
    #[error("batch policy: {0}")]
    Policy(String),
    #[error("training config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<candle_core::Error> for TrainingError {
    fn from(e: candle_core::Error) -> Self {
        TrainingError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ehr: f64,
    pub category: f64,
    pub subclass: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ehr: 10.0, category: 10.0, subclass: 10.0, prior: 1.0 }
    }
}

impl LossWeights {
    pub fn combine(&self, v: &LossValues) -> f64 {
        self.ehr * v.ehr + self.category * v.category + self.subclass * v.subclass + self.prior * v.prior
    }

    fn combine_tensors(&self, t: &LossTerms) -> Result<Tensor, ModelError> {
        Ok((((t.ehr.affine(self.ehr, 0.0)? + t.category.affine(self.category, 0.0)?)?
            + t.subclass.affine(self.subclass, 0.0)?)?
            + t.prior.affine(self.prior, 0.0)?)?)
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if [self.ehr, self.category, self.subclass, self.prior].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(TrainingError::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// One training example: a single fragment with its kind and known
/// category membership (empty for EHRs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub kind: DocumentKind,
    pub token_ids: Vec<u32>,
    pub categories: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn of_kind(&self, kind: DocumentKind) -> TrainingBatch {
        TrainingBatch { items: self.items.iter().filter(|i| i.kind == kind).cloned().collect() }
    }

    pub fn kind_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for i in &self.items {
            c[kind_slot(i.kind)] += 1;
        }
        c
    }
}

fn kind_slot(kind: DocumentKind) -> usize {
    match kind {
        DocumentKind::Ehr => 0,
        DocumentKind::Category => 1,
        DocumentKind::Subclass => 2,
    }
}

/// A sampling unit: one EHR fragment, or one ontology text with all of its
/// fragments (each inheriting the text's membership).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub fragments: Vec<Vec<u32>>,
    pub categories: Vec<usize>,
}

/// Sampling pools for the three example kinds.
#[derive(Debug, Clone, Default)]
pub struct Pools {
    pub ehr: Vec<PoolEntry>,
    pub category: Vec<PoolEntry>,
    pub subclass: Vec<PoolEntry>,
}

impl Pools {
    /// EHRs contribute one entry per non-empty fragment; ontology texts one
    /// entry per document.
    pub fn from_documents(documents: &[Document], vocab: &Vocabulary, window: usize) -> Self {
        let mut pools = Pools::default();
        for doc in documents {
            let frags = fragment_document(doc, vocab, window);
            let categories: Vec<usize> = doc.category_indices.iter().copied().collect();
            match doc.kind {
                DocumentKind::Ehr => pools.ehr.extend(
                    frags
                        .into_iter()
                        .filter(|f| f.true_length > 0)
                        .map(|f| PoolEntry { fragments: vec![f.token_ids], categories: Vec::new() }),
                ),
                DocumentKind::Category | DocumentKind::Subclass => {
                    let entry = PoolEntry { fragments: frags.into_iter().map(|f| f.token_ids).collect(), categories };
                    if doc.kind == DocumentKind::Category {
                        pools.category.push(entry);
                    } else {
                        pools.subclass.push(entry);
                    }
                }
            }
        }
        pools
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.ehr.len(), self.category.len(), self.subclass.len()]
    }

    fn pool(&self, slot: usize) -> (&[PoolEntry], DocumentKind) {
        match slot {
            0 => (&self.ehr, DocumentKind::Ehr),
            1 => (&self.category, DocumentKind::Category),
            _ => (&self.subclass, DocumentKind::Subclass),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, slot: usize, index: usize, rng: &mut R) -> BatchItem {
        let (pool, kind) = self.pool(slot);
        let entry = &pool[index];
        let f = if entry.fragments.len() == 1 { 0 } else { rng.random_range(0..entry.fragments.len()) };
        BatchItem { kind, token_ids: entry.fragments[f].clone(), categories: entry.categories.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum MixPolicy {
    /// Uniform over the union of the three pools, with replacement.
    #[default]
    Uniform,
    /// Fixed per-kind counts; they must add up to the batch size.
    Quota { ehr: usize, category: usize, subclass: usize },
}

pub fn sample_batch<R: Rng + ?Sized>(
    pools: &Pools,
    policy: &MixPolicy,
    batch_size: usize,
    rng: &mut R,
) -> Result<TrainingBatch, TrainingError> {
    let sizes = pools.sizes();
    if sizes[0] == 0 {
        return Err(TrainingError::Policy("EHR pool is empty".into()));
    }
    if batch_size == 0 {
        return Err(TrainingError::Policy("batch size must be positive".into()));
    }
    let mut items = Vec::with_capacity(batch_size);
    match policy {
        MixPolicy::Uniform => {
            let total: usize = sizes.iter().sum();
            for _ in 0..batch_size {
                let mut k = rng.random_range(0..total);
                let mut slot = 0;
                while k >= sizes[slot] {
                    k -= sizes[slot];
                    slot += 1;
                }
                items.push(pools.draw(slot, k, rng));
            }
        }
        MixPolicy::Quota { ehr, category, subclass } => {
            let quota = [*ehr, *category, *subclass];
            if quota.iter().sum::<usize>() != batch_size {
                return Err(TrainingError::Policy(format!("quota {quota:?} does not add up to batch size {batch_size}")));
            }
            for (slot, &q) in quota.iter().enumerate() {
                if q > 0 && sizes[slot] == 0 {
                    return Err(TrainingError::Policy(format!("quota asks for {q} examples from an empty pool")));
                }
                for _ in 0..q {
                    let k = rng.random_range(0..sizes[slot]);
                    items.push(pools.draw(slot, k, rng));
                }
            }
        }
    }
    Ok(TrainingBatch { items })
}

fn kind_losses(model: &Model, batch: &TrainingBatch, kind: DocumentKind) -> Result<Option<LossTerms>, ModelError> {
    let sub = batch.of_kind(kind);
    if sub.is_empty() {
        return Ok(None);
    }
    Ok(Some(batch_losses(model, &sub, PriorScope::All)?))
}

fn zero(model: &Model) -> Result<Tensor, ModelError> {
    Ok(Tensor::zeros((), model.dtype(), model.params.device())?)
}

/// Reconstruction loss over the EHR fragments of `batch` (zero when none).
pub fn loss_reconstruction_ehr(model: &Model, batch: &TrainingBatch) -> Result<Tensor, ModelError> {
    kind_losses(model, batch, DocumentKind::Ehr)?.map_or_else(|| zero(model), |t| Ok(t.ehr))
}

/// Reconstruction plus alpha penalty over the category texts of `batch`.
pub fn loss_reconstruction_category(model: &Model, batch: &TrainingBatch) -> Result<Tensor, ModelError> {
    kind_losses(model, batch, DocumentKind::Category)?.map_or_else(|| zero(model), |t| Ok(t.category))
}

/// Reconstruction plus membership penalty over the subclass texts of `batch`.
pub fn loss_reconstruction_subclass(model: &Model, batch: &TrainingBatch) -> Result<Tensor, ModelError> {
    kind_losses(model, batch, DocumentKind::Subclass)?.map_or_else(|| zero(model), |t| Ok(t.subclass))
}

pub fn loss_prior(model: &Model, batch: &TrainingBatch, scope: PriorScope) -> Result<Tensor, ModelError> {
    Ok(batch_losses(model, batch, scope)?.prior)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub losses: LossValues,
    pub total: f64,
}

impl std::fmt::Display for LossRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let l = &self.losses;
        write!(f, "step {} ehr {} category {} subclass {} prior {} total {}", self.step, l.ehr, l.category, l.subclass, l.prior, self.total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub rows: Vec<LossRow>,
    /// Wall-clock seconds since the start of training, per step.
    pub elapsed: Vec<f64>,
    pub converged: bool,
}

impl TrainingReport {
    pub fn steps(&self) -> usize {
        self.rows.len()
    }
}

pub const LOSS_LOG_HEADER: &str = "step\tehr\tcategory\tsubclass\tprior\ttotal";

pub fn write_loss_row<W: Write>(row: &LossRow, mut out: W) -> std::io::Result<()> {
    let l = &row.losses;
    writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", row.step, l.ehr, l.category, l.subclass, l.prior, row.total)
}

pub fn write_loss_log<W: Write>(rows: &[LossRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOSS_LOG_HEADER}")?;
    for row in rows {
        write_loss_row(row, &mut out)?;
    }
    Ok(())
}

pub fn write_timing_log<W: Write>(report: &TrainingReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "step\tseconds")?;
    for (row, s) in report.rows.iter().zip(&report.elapsed) {
        writeln!(out, "{}\t{s:.6}", row.step)?;
    }
    Ok(())
}

/// Moving-average plateau detector.
#[derive(Debug, Clone)]
struct Plateau {
    rule: ConvergenceRule,
    recent: VecDeque<f64>,
    sum: f64,
    averages: Vec<f64>,
}

impl Plateau {
    fn new(rule: ConvergenceRule) -> Self {
        Self { rule, recent: VecDeque::new(), sum: 0.0, averages: Vec::new() }
    }

    /// Records one loss; true once the moving average has improved by less
    /// than the tolerance over the patience horizon.
    fn push(&mut self, loss: f64) -> bool {
        self.recent.push_back(loss);
        self.sum += loss;
        if self.recent.len() > self.rule.window {
            self.sum -= self.recent.pop_front().unwrap_or(0.0);
        }
        if self.recent.len() < self.rule.window {
            return false;
        }
        self.averages.push(self.sum / self.rule.window as f64);
        let n = self.averages.len();
        if n <= self.rule.patience {
            return false;
        }
        let old = self.averages[n - 1 - self.rule.patience];
        let new = self.averages[n - 1];
        old - new < self.rule.tolerance * old.abs()
    }
}

/// Adam steps on all parameters until the loss plateaus or `max_steps` is
/// reached. `on_step` sees every logged row, the elapsed time and the
/// updated model.
pub fn train_with<F: FnMut(&LossRow, Duration, &Model)>(
    model: &mut Model,
    pools: &Pools,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<TrainingReport, TrainingError> {
    config.validate()?;
    let opt = &config.optimizer;
    let mut adam = AdamW::new(
        model.params.vars_with_prefix(""),
        ParamsAdamW { lr: opt.learning_rate, beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, weight_decay: 0.0 },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut plateau = Plateau::new(config.convergence);
    let mut rows = Vec::new();
    let mut elapsed = Vec::new();
    let start = Instant::now();
    let mut converged = false;
    for step in 0..config.max_steps {
        let batch = sample_batch(pools, &config.mix, config.batch_size, &mut rng)?;
        let terms = batch_losses(model, &batch, config.prior_scope)?;
        let losses = terms.values()?;
        let total = config.weights.combine(&losses);
        let row = LossRow { step, losses, total };
        if ![losses.ehr, losses.category, losses.subclass, losses.prior, total].iter().all(|v| v.is_finite()) {
            let last = rows.last().map_or_else(|| "none".to_string(), |r: &LossRow| r.to_string());
            return Err(TrainingError::Diverged { step, last });
        }
        adam.backward_step(&config.weights.combine_tensors(&terms)?)?;
        let t = start.elapsed();
        on_step(&row, t, model);
        rows.push(row);
        elapsed.push(t.as_secs_f64());
        if plateau.push(total) {
            converged = true;
            break;
        }
    }
    Ok(TrainingReport { rows, elapsed, converged })
}

pub fn train(model: &mut Model, pools: &Pools, config: &TrainConfig) -> Result<TrainingReport, TrainingError> {
    train_with(model, pools, config, |_, _, _| {})
}
