//! Dense multi-head self-attention, FFN, and the plain pre-norm Transformer
//! block. The memorizing block (`fusion` module) reuses every stage here so
//! that with no retrieved memories the two paths are bitwise identical.

use crate::error::{Error, Result};
use crate::prng::{init_gaussian, Prng};
use crate::tensor::{matmul, matmul_transpose_b, softmax_rows, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
/// Initialization scale for all projection weights.
pub const WEIGHT_INIT_STD: f32 = 0.02;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Q/K/V/output projection weights for one attention layer. No biases, so
/// the parameter count is exactly `4 * d_model^2`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn init(d_model: usize, num_heads: usize, prng: &mut Prng) -> Result<Self> {
        if d_model == 0 || num_heads == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::Parameter {
                name: "num_heads",
                message: format!("num_heads {num_heads} must divide d_model {d_model}"),
            });
        }
        let mut proj = || init_gaussian(vec![d_model, d_model], prng, WEIGHT_INIT_STD);
        Ok(AttentionParams {
            w_q: proj()?,
            w_k: proj()?,
            w_v: proj()?,
            w_o: proj()?,
            num_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.num_heads
    }

    pub fn parameter_count(&self) -> u64 {
        4 * (self.d_model() as u64) * (self.d_model() as u64)
    }
}

/// Two-matrix FFN (`d_model -> d_ff -> d_model`), GELU in between, no biases.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl FfnParams {
    pub fn init(d_model: usize, d_ff: usize, prng: &mut Prng) -> Result<Self> {
        Ok(FfnParams {
            w1: init_gaussian(vec![d_model, d_ff], prng, WEIGHT_INIT_STD)?,
            w2: init_gaussian(vec![d_ff, d_model], prng, WEIGHT_INIT_STD)?,
        })
    }

    pub fn parameter_count(&self) -> u64 {
        (self.w1.len() + self.w2.len()) as u64
    }
}

/// Per-feature scale and shift of a layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl LayerNormParams {
    pub fn identity(d_model: usize) -> Self {
        LayerNormParams {
            scale: vec![1.0; d_model],
            shift: vec![0.0; d_model],
        }
    }

    pub fn parameter_count(&self) -> u64 {
        (self.scale.len() + self.shift.len()) as u64
    }
}

/// All weights of one Transformer block. The memorizing variant adds no
/// parameters on top of this: memory attention reuses the local Q projection
/// and the stored tensors are post-projection K/V.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub ffn: FfnParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

impl BlockParams {
    pub fn init(d_model: usize, d_ff: usize, num_heads: usize, prng: &mut Prng) -> Result<Self> {
        Ok(BlockParams {
            attention: AttentionParams::init(d_model, num_heads, prng)?,
            ffn: FfnParams::init(d_model, d_ff, prng)?,
            norm1: LayerNormParams::identity(d_model),
            norm2: LayerNormParams::identity(d_model),
        })
    }

    /// Exact trainable scalar count:
    /// `4*d_model^2 + 2*d_model*d_ff + 2*(2*d_model)`.
    pub fn parameter_count(&self) -> u64 {
        self.attention.parameter_count()
            + self.ffn.parameter_count()
            + self.norm1.parameter_count()
            + self.norm2.parameter_count()
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model()
    }
}

/// Post-projection activations captured from one block forward pass; these
/// tensors are what the bank builder persists for memorized layers.
#[derive(Debug, Clone)]
pub struct BlockActivations {
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    pub block_output: Tensor,
}

/// Row-wise layer norm with scale and shift.
pub fn layer_norm(x: &Tensor, params: &LayerNormParams) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    if params.scale.len() != n {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            left: format!("[{m}, {n}]"),
            right: format!("[{}]", params.scale.len()),
        });
    }
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = (row[j] - mean) * inv * params.scale[j] + params.shift[j];
        }
    }
    Ok(out)
}

/// GELU, tanh approximation (the ViT-family convention).
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Projects tokens into Q, K, V. Q is the single query tensor reused for
/// both local self-attention and memory cross-attention.
pub fn project_qkv(x: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor, Tensor)> {
    if x.cols() != params.d_model() {
        return Err(Error::DimensionMismatch {
            op: "project_qkv",
            left: format!("{:?}", x.shape()),
            right: format!("{:?}", params.w_q.shape()),
        });
    }
    Ok((
        matmul(x, &params.w_q)?,
        matmul(x, &params.w_k)?,
        matmul(x, &params.w_v)?,
    ))
}

/// Scaled dot-product attention of `q` against `(k, v)`, per head, heads
/// concatenated. `k`/`v` may come from the local tokens (self-attention) or
/// from a retrieved memory (cross-attention); the math is the same.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<Tensor> {
    let d_model = q.cols();
    if k.cols() != d_model || v.cols() != d_model || k.rows() != v.rows() {
        return Err(Error::DimensionMismatch {
            op: "multi_head_attention",
            left: format!("q {:?}", q.shape()),
            right: format!("k {:?} v {:?}", k.shape(), v.shape()),
        });
    }
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(Error::DimensionMismatch {
            op: "multi_head_attention",
            left: format!("d_model {d_model}"),
            right: format!("num_heads {num_heads}"),
        });
    }
    let head_dim = d_model / num_heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut out = Tensor::zeros(vec![q.rows(), d_model]);
    for h in 0..num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = q.col_slice(lo, hi);
        let kh = k.col_slice(lo, hi);
        let vh = v.col_slice(lo, hi);
        let scores = matmul_transpose_b(&qh, &kh)?.scale(scale);
        let weights = softmax_rows(&scores);
        let mixed = matmul(&weights, &vh)?;
        out.set_col_block(lo, &mixed);
    }
    Ok(out)
}

/// Local self-attention output `A_L` (pre output-projection).
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<Tensor> {
    if q.rows() != k.rows() {
        return Err(Error::DimensionMismatch {
            op: "dense_attention",
            left: format!("{:?}", q.shape()),
            right: format!("{:?}", k.shape()),
        });
    }
    multi_head_attention(q, k, v, num_heads)
}

/// First half of the block: pre-norm, QKV projection, local attention.
pub(crate) fn block_attention_stage(
    x: &Tensor,
    params: &BlockParams,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let normed = layer_norm(x, &params.norm1)?;
    let (q, k, v) = project_qkv(&normed, &params.attention)?;
    let a_local = dense_attention(&q, &k, &v, params.attention.num_heads)?;
    Ok((q, k, v, a_local))
}

/// Second half of the block: output projection, residual, FFN residual.
/// `attended` is either `A_L` (dense path) or the fused `A_c`.
pub(crate) fn block_finish(
    x: &Tensor,
    params: &BlockParams,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attended: &Tensor,
) -> Result<BlockActivations> {
    let projected = matmul(attended, &params.attention.w_o)?;
    let h = x.add(&projected)?;
    let normed = layer_norm(&h, &params.norm2)?;
    let mut hidden = matmul(&normed, &params.ffn.w1)?;
    for v in hidden.data_mut() {
        *v = gelu(*v);
    }
    let ffn_out = matmul(&hidden, &params.ffn.w2)?;
    let block_output = h.add(&ffn_out)?;
    Ok(BlockActivations {
        queries: q,
        keys: k,
        values: v,
        block_output,
    })
}

/// Plain pre-norm Transformer block:
/// `x + w_o . attn(norm1(x))`, then `+ FFN(norm2(.))` with GELU.
pub fn transformer_block(x: &Tensor, params: &BlockParams) -> Result<BlockActivations> {
    let (q, k, v, a_local) = block_attention_stage(x, params)?;
    block_finish(x, params, q, k, v, &a_local)
}
