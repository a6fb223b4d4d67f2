use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Network dimensions for the encoder, generator and latent classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub window: usize,
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub attention_heads: usize,
    pub num_categories: usize,
    pub latent_dim: usize,
    pub conv_widths: Vec<usize>,
    pub conv_channels: Vec<usize>,
    /// Number of hidden-size memory vectors the generator builds from z*.
    pub memory_slots: usize,
    pub init_std: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Full-size network: 6 layers, hidden 768, intermediate 3072, 12 heads,
    /// 1536-dimensional latent components.
    pub fn reference(vocab_size: usize, num_categories: usize) -> Self {
        Self {
            vocab_size,
            window: 32,
            layers: 6,
            hidden: 768,
            intermediate: 3072,
            attention_heads: 12,
            num_categories,
            latent_dim: 1536,
            conv_widths: vec![8, 4, 2],
            conv_channels: vec![4, 8, 16],
            memory_slots: 2,
            init_std: 0.02,
            precision: Precision::F32,
        }
    }

    /// Desk-scale network: 2 layers, hidden 64, latent 32.
    pub fn small(vocab_size: usize, num_categories: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            intermediate: 256,
            attention_heads: 4,
            latent_dim: 32,
            ..Self::reference(vocab_size, num_categories)
        }
    }

    /// Gradient-check network in double precision.
    pub fn tiny(vocab_size: usize, num_categories: usize) -> Self {
        Self {
            window: 8,
            layers: 1,
            hidden: 16,
            intermediate: 32,
            attention_heads: 2,
            latent_dim: 32,
            init_std: 0.2,
            precision: Precision::F64,
            ..Self::reference(vocab_size, num_categories)
        }
    }

    /// Length of the flattened feature vector after the last pooling stage.
    pub fn classifier_features(&self) -> Option<usize> {
        let mut len = self.latent_dim;
        for &w in &self.conv_widths {
            len = len.checked_sub(w)? + 1;
            len /= 2;
            if len == 0 {
                return None;
            }
        }
        Some(len * self.conv_channels.last()?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        if self.window == 0 || self.layers == 0 || self.num_categories == 0 || self.memory_slots == 0 {
            return bad("window, layers, num_categories and memory_slots must be positive".into());
        }
        if self.attention_heads == 0 || !self.hidden.is_multiple_of(self.attention_heads) {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.attention_heads));
        }
        if self.conv_widths.is_empty() || self.conv_widths.len() != self.conv_channels.len() {
            return bad("conv_widths and conv_channels must be non-empty and equally long".into());
        }
        if self.classifier_features().is_none() {
            return bad(format!("latent_dim {} too short for the convolution stack", self.latent_dim));
        }
        Ok(())
    }
}
