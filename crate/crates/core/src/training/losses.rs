use candle_core::{DType, Tensor};

use super::{BatchItem, TrainingBatch};
use crate::corpus::{DocumentKind, PAD_ID};
use crate::model::{Model, ModelError};

pub const EPSILON: f64 = 1e-7;

type Result<T> = std::result::Result<T, ModelError>;

/// Which examples contribute to the prior loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorScope {
    #[default]
    All,
    /// Category and subclass texts only.
    Ontology,
}

/// The four scalar losses of one batch, as graph tensors.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ehr: Tensor,
    pub category: Tensor,
    pub subclass: Tensor,
    pub prior: Tensor,
    /// `(batch, M)` alpha of the forward pass, for logging and oracles.
    pub alpha: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ehr: f64,
    pub category: f64,
    pub subclass: f64,
    pub prior: f64,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossValues> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossValues { ehr: v(&self.ehr)?, category: v(&self.category)?, subclass: v(&self.subclass)?, prior: v(&self.prior)? })
    }
}

/// `(1/M) * sum_j -[y_j log a_j + (1 - y_j) log(1 - a_j)]` per row, with
/// `a` clamped to `[eps, 1 - eps]`. `alpha` and `targets` are `(n, M)`.
pub fn alpha_penalty(alpha: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let m = alpha.dim(1)? as f64;
    let a = alpha.clamp(EPSILON, 1.0 - EPSILON)?;
    let pos = targets.mul(&a.log()?)?;
    let neg = (1.0 - targets)?.mul(&(1.0 - &a)?.log()?)?;
    Ok(((pos + neg)?.sum(1)? / (-m))?)
}

/// Per-row mean cross-entropy over non-PAD target positions; rows without
/// any tokens score zero. `log_probs` is `(n, len, V)`.
pub fn token_cross_entropy(log_probs: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
    let (n, len, _) = log_probs.dims3()?;
    let device = log_probs.device();
    let flat: Vec<u32> = targets.iter().flatten().copied().collect();
    let mask: Vec<f64> = flat.iter().map(|&t| if t == PAD_ID { 0.0 } else { 1.0 }).collect();
    let counts: Vec<f64> = targets.iter().map(|r| r.iter().filter(|&&t| t != PAD_ID).count().max(1) as f64).collect();
    let idx = Tensor::from_vec(flat, (n, len, 1), device)?;
    let mask = Tensor::from_vec(mask, (n, len), device)?.to_dtype(log_probs.dtype())?;
    let counts = Tensor::from_vec(counts, n, device)?.to_dtype(log_probs.dtype())?;
    let picked = log_probs.gather(&idx, 2)?.squeeze(2)?;
    Ok((picked.mul(&mask)?.sum(1)?.neg()? / counts)?)
}

/// Per-row `sum_j -log D(c_j | z_j)` for components `(n, M, d_z)`, with the
/// classifier probabilities clamped like alpha.
pub fn prior_per_example(model: &Model, components: &Tensor) -> Result<Tensor> {
    let (n, m, dz) = components.dims3()?;
    let lp = model.classify_log_probs(&components.reshape((n * m, dz))?)?;
    let lp = lp.clamp(EPSILON.ln(), (1.0 - EPSILON).ln())?;
    let classes: Vec<u32> = (0..n).flat_map(|_| 0..m as u32).collect();
    let idx = Tensor::from_vec(classes, (n * m, 1), lp.device())?;
    Ok(lp.gather(&idx, 1)?.reshape((n, m))?.sum(1)?.neg()?)
}

fn mean_over(rows: &Tensor, selected: &[bool]) -> Result<Tensor> {
    let count = selected.iter().filter(|&&s| s).count();
    let w: Vec<f64> = selected.iter().map(|&s| if s && count > 0 { 1.0 / count as f64 } else { 0.0 }).collect();
    let w = Tensor::from_vec(w, rows.dim(0)?, rows.device())?.to_dtype(rows.dtype())?;
    Ok(rows.mul(&w)?.sum_all()?)
}

fn target_matrix(items: &[BatchItem], m: usize, model: &Model) -> Result<Tensor> {
    let mut y = vec![0.0f64; items.len() * m];
    for (i, item) in items.iter().enumerate() {
        for &j in &item.categories {
            if j >= m {
                return Err(ModelError::Input(format!("category index {j} out of range for {m} categories")));
            }
            y[i * m + j] = 1.0;
        }
    }
    Ok(Tensor::from_vec(y, (items.len(), m), model.params.device())?.to_dtype(model.dtype())?)
}

/// All four losses from a single forward pass over the batch. A kind that
/// is absent from the batch contributes zero.
pub fn batch_losses(model: &Model, batch: &TrainingBatch, scope: PriorScope) -> Result<LossTerms> {
    let items = &batch.items;
    if items.is_empty() {
        return Err(ModelError::Input("empty batch".into()));
    }
    for item in items {
        if item.kind != DocumentKind::Ehr && item.categories.is_empty() {
            return Err(ModelError::Input(format!("{:?} example without category membership", item.kind)));
        }
    }
    let ids: Vec<Vec<u32>> = items.iter().map(|i| i.token_ids.clone()).collect();
    let enc = model.encode_batch(&ids)?;
    let rec = token_cross_entropy(&model.generate_log_probs(&enc.composite, &ids)?, &ids)?;
    let penalty = alpha_penalty(&enc.alpha, &target_matrix(items, model.config.num_categories, model)?)?;
    let prior_rows = prior_per_example(model, &enc.components)?;

    let is = |k: DocumentKind| -> Vec<bool> { items.iter().map(|i| i.kind == k).collect() };
    let ontology_rows = (&rec + &penalty)?;
    let in_prior: Vec<bool> = items.iter().map(|i| scope == PriorScope::All || i.kind != DocumentKind::Ehr).collect();
    Ok(LossTerms {
        ehr: mean_over(&rec, &is(DocumentKind::Ehr))?,
        category: mean_over(&ontology_rows, &is(DocumentKind::Category))?,
        subclass: mean_over(&ontology_rows, &is(DocumentKind::Subclass))?,
        prior: mean_over(&prior_rows, &in_prior)?,
        alpha: enc.alpha,
    })
}
