//! The three networks: an encoder producing the latent composition, a
//! generator reconstructing a fragment from the composite latent, and a
//! convolutional classifier over individual latent components.

mod checkpoint;
mod config;
mod layers;
mod params;

use candle_core::{DType, Tensor};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Precision};
pub use params::ParamStore;

use crate::corpus::{Fragment, PAD_ID};
use layers::{
    attention, causal_bias, conv1d, declare_attention, declare_ffn, declare_layer_norm, declare_linear, embed, ffn,
    layer_norm, linear, log_softmax, MASK_VALUE,
};
use params::{init_rng, Init};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Encoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(batch, M)`, sigmoid weights.
    pub alpha: Tensor,
    /// `(batch, M, d_z)`.
    pub components: Tensor,
    /// `(batch, d_z)`, equal to `sum_j alpha_j * components_j`.
    pub composite: Tensor,
    /// `(batch, hidden)`, mean of the final hidden states over non-PAD tokens.
    pub pooled: Tensor,
}

/// Host-side copy of one fragment's composition.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentComposition {
    pub alpha: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub composite: Vec<f64>,
}

impl LatentComposition {
    /// `||z* - sum_j alpha_j z_j|| / ||z*||`, or the absolute residual norm
    /// when `z*` is zero.
    pub fn composition_residual(&self) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (d, &z) in self.composite.iter().enumerate() {
            let recomposed: f64 = self.alpha.iter().zip(&self.components).map(|(a, c)| a * c[d]).sum();
            num += (z - recomposed).powi(2);
            den += z * z;
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.composite).chain(self.components.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Class distribution from the latent classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

pub(crate) fn to_f64_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

impl Model {
    /// Fresh parameters drawn from a seeded generator. Weight matrices and
    /// embeddings are normal with `init_std`, biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let std = c.init_std;
        let mut rng = init_rng(seed);
        let mut p = ParamStore::new(c.precision.dtype());

        p.declare("enc.tok_emb", &[c.vocab_size, c.hidden], Init::Normal(std), &mut rng)?;
        p.declare("enc.pos_emb", &[c.window, c.hidden], Init::Normal(std), &mut rng)?;
        for l in 0..c.layers {
            let n = format!("enc.layer{l}");
            declare_attention(&mut p, &format!("{n}.attn"), c.hidden, std, &mut rng)?;
            declare_layer_norm(&mut p, &format!("{n}.ln1"), c.hidden, &mut rng)?;
            declare_ffn(&mut p, &format!("{n}.ffn"), c.hidden, c.intermediate, std, &mut rng)?;
            declare_layer_norm(&mut p, &format!("{n}.ln2"), c.hidden, &mut rng)?;
        }
        declare_linear(&mut p, "enc.alpha", c.hidden, c.num_categories, std, &mut rng)?;
        declare_linear(&mut p, "enc.latent", c.hidden, c.num_categories * c.latent_dim, std, &mut rng)?;

        declare_linear(&mut p, "gen.memory", c.latent_dim, c.memory_slots * c.hidden, std, &mut rng)?;
        p.declare("gen.tok_emb", &[c.vocab_size, c.hidden], Init::Normal(std), &mut rng)?;
        p.declare("gen.pos_emb", &[c.window, c.hidden], Init::Normal(std), &mut rng)?;
        for l in 0..c.layers {
            let n = format!("gen.layer{l}");
            declare_attention(&mut p, &format!("{n}.self"), c.hidden, std, &mut rng)?;
            declare_layer_norm(&mut p, &format!("{n}.ln1"), c.hidden, &mut rng)?;
            declare_attention(&mut p, &format!("{n}.cross"), c.hidden, std, &mut rng)?;
            declare_layer_norm(&mut p, &format!("{n}.ln2"), c.hidden, &mut rng)?;
            declare_ffn(&mut p, &format!("{n}.ffn"), c.hidden, c.intermediate, std, &mut rng)?;
            declare_layer_norm(&mut p, &format!("{n}.ln3"), c.hidden, &mut rng)?;
        }
        declare_linear(&mut p, "gen.out", c.hidden, c.vocab_size, std, &mut rng)?;

        let mut in_channels = 1;
        for (k, (&w, &ch)) in c.conv_widths.iter().zip(&c.conv_channels).enumerate() {
            p.declare(&format!("cls.conv{k}.w"), &[ch, in_channels, w], Init::Normal(std), &mut rng)?;
            p.declare(&format!("cls.conv{k}.b"), &[ch], Init::Zeros, &mut rng)?;
            in_channels = ch;
        }
        let features = c.classifier_features().expect("validated");
        declare_linear(&mut p, "cls.head", features, c.num_categories, std, &mut rng)?;

        Ok(Self { config, params: p })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn id_tensor(&self, ids: &[Vec<u32>]) -> Result<Tensor> {
        let len = ids.first().map_or(0, Vec::len);
        if ids.is_empty() || len == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        if len > self.config.window {
            return Err(ModelError::Input(format!("sequence length {len} exceeds window {}", self.config.window)));
        }
        let mut flat = Vec::with_capacity(ids.len() * len);
        for row in ids {
            if row.len() != len {
                return Err(ModelError::Input("ragged batch".into()));
            }
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(ModelError::Input(format!("token id {bad} out of range for vocabulary {}", self.config.vocab_size)));
            }
            flat.extend_from_slice(row);
        }
        Ok(Tensor::from_vec(flat, (ids.len(), len), self.params.device())?)
    }

    /// Encodes a batch of equal-length token id rows (length at most the
    /// window). PAD tokens are masked out of attention and pooling.
    pub fn encode_batch(&self, ids: &[Vec<u32>]) -> Result<Encoded> {
        let c = &self.config;
        let p = &self.params;
        let dtype = self.dtype();
        let ids_t = self.id_tensor(ids)?;
        let (b, t) = ids_t.dims2()?;

        let mask_vals: Vec<f64> =
            ids.iter().flat_map(|row| row.iter().map(|&id| if id == PAD_ID { 0.0 } else { 1.0 })).collect();
        let mask = Tensor::from_vec(mask_vals, (b, t), p.device())?.to_dtype(dtype)?;
        let key_bias = ((&mask - 1.0)? * (-MASK_VALUE))?.reshape((b, 1, 1, t))?;

        let mut x = embed(&ids_t, p.get("enc.tok_emb")?)?
            .broadcast_add(&p.get("enc.pos_emb")?.narrow(0, 0, t)?)?;
        for l in 0..c.layers {
            let n = format!("enc.layer{l}");
            let a = attention(&x, &x, p, &format!("{n}.attn"), c.attention_heads, Some(&key_bias))?;
            x = layer_norm(&(x + a)?, p, &format!("{n}.ln1"))?;
            let f = ffn(&x, p, &format!("{n}.ffn"))?;
            x = layer_norm(&(x + f)?, p, &format!("{n}.ln2"))?;
        }
        let counts = mask.sum_keepdim(1)?.clamp(1.0, f64::INFINITY)?;
        let pooled = x.broadcast_mul(&mask.unsqueeze(2)?)?.sum(1)?.broadcast_div(&counts)?;

        let alpha = candle_nn::ops::sigmoid(&linear(&pooled, p, "enc.alpha")?)?;
        let components = linear(&pooled, p, "enc.latent")?.reshape((b, c.num_categories, c.latent_dim))?;
        let composite = components.broadcast_mul(&alpha.unsqueeze(2)?)?.sum(1)?;
        Ok(Encoded { alpha, components, composite, pooled })
    }

    /// Teacher-forced reconstruction log-probabilities `(batch, len, vocab)`.
    /// Position `i` predicts `targets[i]` from `targets[..i]` and the memory
    /// built from `composite`.
    pub fn generate_log_probs(&self, composite: &Tensor, targets: &[Vec<u32>]) -> Result<Tensor> {
        let c = &self.config;
        let p = &self.params;
        let (b, dz) = composite.dims2()?;
        if dz != c.latent_dim {
            return Err(ModelError::Input(format!("composite has dimension {dz}, expected {}", c.latent_dim)));
        }
        if targets.len() != b {
            return Err(ModelError::Input(format!("{} targets for {b} latents", targets.len())));
        }
        let shifted: Vec<Vec<u32>> = targets
            .iter()
            .map(|row| std::iter::once(PAD_ID).chain(row.iter().copied()).take(row.len()).collect())
            .collect();
        let ids_t = self.id_tensor(&shifted)?;
        // validates the targets themselves too
        self.id_tensor(targets)?;
        let t = ids_t.dim(1)?;

        let memory = linear(composite, p, "gen.memory")?.reshape((b, c.memory_slots, c.hidden))?;
        let causal = causal_bias(t, self.dtype(), p.device())?;
        let mut x = embed(&ids_t, p.get("gen.tok_emb")?)?
            .broadcast_add(&p.get("gen.pos_emb")?.narrow(0, 0, t)?)?;
        for l in 0..c.layers {
            let n = format!("gen.layer{l}");
            let a = attention(&x, &x, p, &format!("{n}.self"), c.attention_heads, Some(&causal))?;
            x = layer_norm(&(x + a)?, p, &format!("{n}.ln1"))?;
            let m = attention(&x, &memory, p, &format!("{n}.cross"), c.attention_heads, None)?;
            x = layer_norm(&(x + m)?, p, &format!("{n}.ln2"))?;
            let f = ffn(&x, p, &format!("{n}.ffn"))?;
            x = layer_norm(&(x + f)?, p, &format!("{n}.ln3"))?;
        }
        let logits = linear(&x, p, "gen.out")?;
        log_softmax(&logits)
    }

    /// Class log-probabilities `(n, M)` for latent vectors `(n, d_z)`, each
    /// treated as a one-channel signal.
    pub fn classify_log_probs(&self, z: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let p = &self.params;
        let (n, dz) = z.dims2()?;
        if dz != c.latent_dim {
            return Err(ModelError::Input(format!("latent has dimension {dz}, expected {}", c.latent_dim)));
        }
        let mut x = z.reshape((n, 1, dz))?;
        for k in 0..c.conv_widths.len() {
            let w = p.get(&format!("cls.conv{k}.w"))?;
            let bias = p.get(&format!("cls.conv{k}.b"))?;
            x = conv1d(&x, w)?.broadcast_add(&bias.reshape((1, (), 1))?)?.relu()?;
            let (_, ch, len) = x.dims3()?;
            let pooled = len / 2;
            x = x.narrow(2, 0, pooled * 2)?.reshape((n, ch, pooled, 2))?.max(3)?;
        }
        let logits = linear(&x.flatten_from(1)?, p, "cls.head")?;
        log_softmax(&logits)
    }

    /// Composition of a single fragment.
    pub fn encode(&self, fragment: &Fragment) -> Result<LatentComposition> {
        let enc = self.encode_batch(std::slice::from_ref(&fragment.token_ids))?;
        let alpha = to_f64_rows(&enc.alpha)?.remove(0);
        let components = to_f64_rows(&enc.components.squeeze(0)?)?;
        let composite = to_f64_rows(&enc.composite)?.remove(0);
        Ok(LatentComposition { alpha, components, composite })
    }

    /// Alpha rows for many fragments, `batch_size` at a time.
    pub fn alpha_rows(&self, fragments: &[&Fragment], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(fragments.len());
        for chunk in fragments.chunks(batch_size.max(1)) {
            let ids: Vec<Vec<u32>> = chunk.iter().map(|f| f.token_ids.clone()).collect();
            rows.extend(to_f64_rows(&self.encode_batch(&ids)?.alpha)?);
        }
        Ok(rows)
    }

    /// Per-position vocabulary distributions for one fragment.
    pub fn generate(&self, composite: &[f64], target: &Fragment) -> Result<Vec<Vec<f64>>> {
        let z = Tensor::from_slice(composite, (1, composite.len()), self.params.device())?.to_dtype(self.dtype())?;
        let lp = self.generate_log_probs(&z, std::slice::from_ref(&target.token_ids))?;
        to_f64_rows(&lp.exp()?.squeeze(0)?)
    }

    pub fn classify_latent(&self, z: &[f64]) -> Result<ClassProbabilities> {
        let t = Tensor::from_slice(z, (1, z.len()), self.params.device())?.to_dtype(self.dtype())?;
        let probs = to_f64_rows(&self.classify_log_probs(&t)?.exp()?)?.remove(0);
        Ok(ClassProbabilities { probs })
    }
}
