use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;

pub(crate) enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub(crate) fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub(crate) fn declare(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<(), ModelError> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.insert(name, values, shape)
    }

    pub(crate) fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<(), ModelError> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.vars.get(name).map(Var::as_tensor).ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose names start with `prefix` (all when empty).
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened values of one parameter as f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>, ModelError> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Overwrites one parameter from flattened f64 values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let var = self.vars.get(name).ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self, ModelError> {
        let mut out = Self::new(self.dtype);
        for (name, var) in &self.vars {
            out.vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().detach())?);
        }
        Ok(out)
    }
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
