//! Independent scalar reference implementations used only by unit tests.
//! These deliberately avoid the production kernels (separate loops, separate
//! layer norm / GELU code) so they can serve as oracles for them.

use crate::attention::BlockParams;
use crate::tensor::Tensor;

pub fn matmul_ref(a: &Tensor, b: &Tensor) -> Vec<f32> {
    let (m, p, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for k in 0..p {
                acc += a.at(i, k) * b.at(k, j);
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Single-tensor softmax-attention reference for self-attention.
pub fn attention_ref(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Vec<f32> {
    attention_ref_cross(q, k, v, num_heads)
}

/// Scalar cross-attention reference: for each head and each query row,
/// explicit logits, explicit exp-normalization, explicit value mixing.
pub fn attention_ref_cross(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Vec<f32> {
    let d_model = q.cols();
    let head_dim = d_model / num_heads;
    let (n, m) = (q.rows(), k.rows());
    let mut out = vec![0.0f32; n * d_model];
    for h in 0..num_heads {
        let off = h * head_dim;
        for i in 0..n {
            let mut logits = vec![0.0f32; m];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0f32;
                for c in 0..head_dim {
                    dot += q.at(i, off + c) * k.at(j, off + c);
                }
                *logit = dot / (head_dim as f32).sqrt();
            }
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            for c in 0..head_dim {
                let mut acc = 0.0f32;
                for (j, &e) in exps.iter().enumerate() {
                    acc += e / sum * v.at(j, off + c);
                }
                out[i * d_model + off + c] = acc;
            }
        }
    }
    out
}

fn layer_norm_ref(x: &[f32], n_cols: usize, scale: &[f32], shift: &[f32]) -> Vec<f32> {
    let rows = x.len() / n_cols;
    let mut out = vec![0.0f32; x.len()];
    for i in 0..rows {
        let row = &x[i * n_cols..(i + 1) * n_cols];
        let mean: f32 = row.iter().sum::<f32>() / n_cols as f32;
        let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n_cols as f32;
        let denom = (var + 1e-5).sqrt();
        for j in 0..n_cols {
            out[i * n_cols + j] = (row[j] - mean) / denom * scale[j] + shift[j];
        }
    }
    out
}

fn gelu_ref(x: f32) -> f32 {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Chains the scalar block reference over an embedded token tensor,
/// mirroring the encoder's layer loop without the production block code.
pub fn encoder_ref(tokens: &Tensor, blocks: &[BlockParams]) -> Vec<f32> {
    let mut x = tokens.clone();
    for params in blocks {
        let out = block_ref(&x, params);
        x = Tensor::new(x.shape().to_vec(), out).unwrap();
    }
    x.into_data()
}

/// Full scalar reference of the pre-norm block forward pass.
pub fn block_ref(x: &Tensor, params: &BlockParams) -> Vec<f32> {
    let d = params.d_model();
    let n = x.rows();
    let normed = layer_norm_ref(x.data(), d, &params.norm1.scale, &params.norm1.shift);
    let normed_t = Tensor::new(vec![n, d], normed).unwrap();
    let q = Tensor::new(vec![n, d], matmul_ref(&normed_t, &params.attention.w_q)).unwrap();
    let k = Tensor::new(vec![n, d], matmul_ref(&normed_t, &params.attention.w_k)).unwrap();
    let v = Tensor::new(vec![n, d], matmul_ref(&normed_t, &params.attention.w_v)).unwrap();
    let attended = attention_ref_cross(&q, &k, &v, params.attention.num_heads);
    let attended_t = Tensor::new(vec![n, d], attended).unwrap();
    let projected = matmul_ref(&attended_t, &params.attention.w_o);
    let h: Vec<f32> = x.data().iter().zip(&projected).map(|(a, b)| a + b).collect();
    let normed2 = layer_norm_ref(&h, d, &params.norm2.scale, &params.norm2.shift);
    let normed2_t = Tensor::new(vec![n, d], normed2).unwrap();
    let mut hidden = matmul_ref(&normed2_t, &params.ffn.w1);
    for v in hidden.iter_mut() {
        *v = gelu_ref(*v);
    }
    let hidden_t = Tensor::new(vec![n, params.ffn.w1.cols()], hidden).unwrap();
    let ffn_out = matmul_ref(&hidden_t, &params.ffn.w2);
    h.iter().zip(&ffn_out).map(|(a, b)| a + b).collect()
}

/// Regenerates the frozen vectors asserted in `tests/golden.rs`. Run with
/// `cargo test -p memattn-core print_golden -- --ignored --nocapture`.
#[test]
#[ignore]
fn print_golden_vectors() {
    use crate::encoder::{patch_embed, EncoderConfig, EncoderWeights};
    use crate::prng::Prng;
    use crate::volume::Volume;

    // tiny block: n = 4, d_model = 8, d_ff = 32, 2 heads, seed 4242
    let mut prng = Prng::new(4242);
    let params = BlockParams::init(8, 32, 2, &mut prng).unwrap();
    let x_data: Vec<f32> = (0..32).map(|_| prng.uniform_f32() * 2.0 - 1.0).collect();
    let x = Tensor::new(vec![4, 8], x_data.clone()).unwrap();
    println!("block input: {x_data:?}");
    println!("block golden: {:?}", block_ref(&x, &params));

    // tiny encoder: 16^3 volume (seed 99), patch 8, d_model 8, 2 layers
    let cfg = EncoderConfig {
        volume_dims: [16, 16, 16],
        patch_size: 8,
        d_model: 8,
        d_ff: 16,
        num_heads: 2,
        num_layers: 2,
        memorizing_layers: vec![],
        seed: 77,
    };
    let weights = EncoderWeights::init(&cfg).unwrap();
    let volume = Volume::random(cfg.volume_dims, 99).unwrap();
    let tokens = patch_embed(&volume, &weights).unwrap();
    println!("encoder golden: {:?}", encoder_ref(&tokens, &weights.blocks));
}
