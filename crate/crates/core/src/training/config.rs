use serde::{Deserialize, Serialize};

use super::{LossWeights, MixPolicy, PriorScope, TrainingError};
use crate::model::{ModelConfig, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Reference,
    #[default]
    Small,
    Tiny,
}

/// A preset plus optional overrides. Vocabulary size and category count
/// come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub preset: ModelPreset,
    pub window: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub intermediate: Option<usize>,
    pub attention_heads: Option<usize>,
    pub latent_dim: Option<usize>,
    pub memory_slots: Option<usize>,
    pub init_std: Option<f64>,
    pub precision: Option<Precision>,
}

impl ModelSpec {
    pub fn build(&self, vocab_size: usize, num_categories: usize) -> ModelConfig {
        let mut c = match self.preset {
            ModelPreset::Reference => ModelConfig::reference(vocab_size, num_categories),
            ModelPreset::Small => ModelConfig::small(vocab_size, num_categories),
            ModelPreset::Tiny => ModelConfig::tiny(vocab_size, num_categories),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        apply!(window, layers, hidden, intermediate, attention_heads, latent_dim, memory_slots, init_std, precision);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Stop when the `window`-step moving average of the combined loss has
/// improved by less than `tolerance` (relative) over `patience` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceRule {
    pub window: usize,
    pub patience: usize,
    pub tolerance: f64,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self { window: 100, patience: 500, tolerance: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub prior_scope: PriorScope,
    pub model: ModelSpec,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub mix: MixPolicy,
    pub convergence: ConvergenceRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: 20_000,
            batch_size: 32,
            prior_scope: PriorScope::All,
            model: ModelSpec::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            mix: MixPolicy::Uniform,
            convergence: ConvergenceRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainingError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        self.weights.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(TrainingError::Config(format!("bad optimizer settings {o:?}")));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be positive".into()));
        }
        if self.convergence.window == 0 {
            return Err(TrainingError::Config("convergence window must be positive".into()));
        }
        Ok(())
    }
}
