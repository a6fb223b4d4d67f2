//! Building blocks shared by the encoder and generator stacks.

use candle_core::{DType, Device, Tensor, D};

use super::params::{Init, ParamStore};
use super::ModelError;
use rand_chacha::ChaCha8Rng;

type Result<T> = std::result::Result<T, ModelError>;

pub(crate) const MASK_VALUE: f64 = -1e9;

pub(crate) fn declare_linear(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.declare(&format!("{name}.w"), &[output, input], Init::Normal(std), rng)?;
    store.declare(&format!("{name}.b"), &[output], Init::Zeros, rng)
}

pub(crate) fn declare_layer_norm(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.declare(&format!("{name}.g"), &[dim], Init::Ones, rng)?;
    store.declare(&format!("{name}.b"), &[dim], Init::Zeros, rng)
}

/// `x W^T + b` over the last dimension of `x`.
pub(crate) fn linear(x: &Tensor, store: &ParamStore, name: &str) -> Result<Tensor> {
    let w = store.get(&format!("{name}.w"))?;
    let b = store.get(&format!("{name}.b"))?;
    let dims = x.dims().to_vec();
    let (lead, input) = dims.split_at(dims.len() - 1);
    let rows: usize = lead.iter().product();
    let y = x.reshape((rows, input[0]))?.matmul(&w.t()?)?.broadcast_add(b)?;
    let mut out_dims = lead.to_vec();
    out_dims.push(w.dim(0)?);
    Ok(y.reshape(out_dims)?)
}

pub(crate) fn layer_norm(x: &Tensor, store: &ParamStore, name: &str) -> Result<Tensor> {
    let g = store.get(&format!("{name}.g"))?;
    let b = store.get(&format!("{name}.b"))?;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.broadcast_mul(g)?.broadcast_add(b)?)
}

pub(crate) fn declare_attention(store: &mut ParamStore, name: &str, hidden: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        declare_linear(store, &format!("{name}.{part}"), hidden, hidden, std, rng)?;
    }
    Ok(())
}

/// Multi-head scaled dot-product attention. `bias` is added to the scores
/// and must broadcast to `(batch, heads, queries, keys)`.
pub(crate) fn attention(
    queries: &Tensor,
    keys: &Tensor,
    store: &ParamStore,
    name: &str,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, tq, h) = queries.dims3()?;
    let tk = keys.dim(1)?;
    let dh = h / heads;
    let split = |x: &Tensor, t: usize| -> Result<Tensor> {
        Ok(x.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()?)
    };
    let q = split(&linear(queries, store, &format!("{name}.q"))?, tq)?;
    let k = split(&linear(keys, store, &format!("{name}.k"))?, tk)?;
    let v = split(&linear(keys, store, &format!("{name}.v"))?, tk)?;
    let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let probs = softmax(&scores)?;
    let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, tq, h))?;
    linear(&ctx, store, &format!("{name}.o"))
}

pub(crate) fn declare_ffn(store: &mut ParamStore, name: &str, hidden: usize, inner: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    declare_linear(store, &format!("{name}.up"), hidden, inner, std, rng)?;
    declare_linear(store, &format!("{name}.down"), inner, hidden, std, rng)
}

/// GELU in its sigmoid form, `x * sigmoid(1.702 x)`.
pub(crate) fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&candle_nn::ops::sigmoid(&x.affine(1.702, 0.0)?)?)?)
}

pub(crate) fn ffn(x: &Tensor, store: &ParamStore, name: &str) -> Result<Tensor> {
    let h = gelu(&linear(x, store, &format!("{name}.up"))?)?;
    linear(&h, store, &format!("{name}.down"))
}

/// Upper-triangular additive mask `(1, 1, t, t)`.
pub(crate) fn causal_bias(t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f64> =
        (0..t).flat_map(|i| (0..t).map(move |j| if j > i { MASK_VALUE } else { 0.0 })).collect();
    Ok(Tensor::from_vec(values, (1, 1, t, t), device)?.to_dtype(dtype)?)
}

/// Gathers `emb[ids]` for a `(batch, len)` id matrix.
pub(crate) fn embed(ids: &Tensor, table: &Tensor) -> Result<Tensor> {
    let (b, t) = ids.dims2()?;
    let h = table.dim(1)?;
    Ok(table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, h))?)
}

/// Valid, stride-1 convolution of `x` `(batch, in, len)` with `w`
/// `(out, in, width)`, written as an unfold followed by a matmul.
pub(crate) fn conv1d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, len) = x.dims3()?;
    let (o, _, k) = w.dims3()?;
    let out_len = len + 1 - k;
    let taps: Vec<Tensor> = (0..k).map(|i| x.narrow(2, i, out_len)).collect::<candle_core::Result<_>>()?;
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k, out_len))?;
    Ok(w.reshape((1, o, c * k))?.broadcast_matmul(&cols)?)
}


/// Softmax over the last dimension, shifted by the detached row maximum.
pub(crate) fn softmax(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `x - logsumexp(x)` over the last dimension. The shift by the row maximum
/// is treated as a constant, which leaves the gradient unchanged.
pub(crate) fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&shift)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
