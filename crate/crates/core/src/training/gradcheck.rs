//! Central finite-difference checks of backpropagated gradients.

use candle_core::{DType, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::model::{Model, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(t: &Tensor) -> Result<f64, ModelError> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Probes `probes` random scalar parameters among those that receive a
/// gradient from `loss`, comparing the backpropagated value with
/// `(L(w + h) - L(w - h)) / 2h`. Parameters are restored afterwards.
pub fn check_gradients<L, R>(
    model: &Model,
    loss: L,
    probes: usize,
    step: f64,
    floor: f64,
    rng: &mut R,
) -> Result<Vec<GradientProbe>, ModelError>
where
    L: Fn(&Model) -> Result<Tensor, ModelError>,
    R: Rng + ?Sized,
{
    let grads = loss(model)?.backward()?;
    let mut candidates: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, var) in model.params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let g = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if g.iter().any(|v| *v != 0.0) {
                candidates.push((name.to_string(), g));
            }
        }
    }
    if candidates.is_empty() {
        return Err(ModelError::Input("loss has no gradient with respect to any parameter".into()));
    }
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let (name, g) = candidates.choose(rng).expect("non-empty");
        let index = rng.random_range(0..g.len());
        let original = model.params.values(name)?;
        let mut shifted = original.clone();
        shifted[index] = original[index] + step;
        model.params.set_values(name, &shifted)?;
        let plus = scalar(&loss(model)?)?;
        shifted[index] = original[index] - step;
        model.params.set_values(name, &shifted)?;
        let minus = scalar(&loss(model)?)?;
        model.params.set_values(name, &original)?;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(GradientProbe {
            parameter: name.clone(),
            index,
            analytic: g[index],
            numeric,
            relative_error: relative_error(g[index], numeric, floor),
        });
    }
    Ok(out)
}
