//! Memory-augmented attention: kNN retrieval of stored (key, value) pairs,
//! per-memory cross-attention against the local queries, and ratio-based
//! fusion of memory attention with local attention.
//!
//! Two fusion modes ship side by side. `PaperLiteral` computes
//! `R_i = D_i / sum_j(R_L / D_j)`, which weights farther memories more and
//! does not form a convex combination. `NormalizedInverseDistance` (the
//! default) computes `R_i = (1 - R_L) * (1/D_i) / sum_j(1/D_j)` so that
//! `R_L + sum(R_i) = 1` and closer memories weigh more. Neither mode is
//! asserted as the "right" one; both are selectable per run.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{block_attention_stage, block_finish, multi_head_attention};
use crate::attention::{BlockActivations, BlockParams};
use crate::bank::MemorySource;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_R_LOCAL: f64 = 0.3;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// How retrieved-memory attention outputs are weighted against local
/// attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// The printed combination-ratio formula, kept verbatim:
    /// `R_i = D_i / sum_j(R_L / D_j)`.
    PaperLiteral,
    /// Convex combination: `R_i = (1 - R_L) * (1/D_i) / sum_j(1/D_j)`.
    #[default]
    NormalizedInverseDistance,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::PaperLiteral => write!(f, "paper-literal"),
            FusionMode::NormalizedInverseDistance => write!(f, "normalized-inverse-distance"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(FusionMode::PaperLiteral),
            "normalized-inverse-distance" => Ok(FusionMode::NormalizedInverseDistance),
            other => Err(Error::Parameter {
                name: "fusion_mode",
                message: format!(
                    "unknown mode {other:?} (expected paper-literal or \
                     normalized-inverse-distance)"
                ),
            }),
        }
    }
}

/// Hyperparameters of a memorizing block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Preset ratio for local attention, in `[0, 1]`.
    pub r_local: f64,
    /// kNN breadth: number of memories retrieved per image.
    pub k: usize,
    pub fusion_mode: FusionMode,
    /// Lower clamp applied to retrieval distances before weighting.
    pub epsilon: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            r_local: DEFAULT_R_LOCAL,
            k: DEFAULT_K,
            fusion_mode: FusionMode::default(),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r_local) {
            return Err(Error::Parameter {
                name: "r_local",
                message: format!("must be in [0, 1], got {}", self.r_local),
            });
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Parameter {
                name: "epsilon",
                message: format!("must be positive, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Resolved fusion coefficients for one retrieval.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub r_local: f64,
    /// One weight per retrieved memory, same order as `distances`.
    pub r_mem: Vec<f64>,
    /// Clamped distances the weights were computed from.
    pub distances: Vec<f64>,
}

impl FusionWeights {
    /// Shannon entropy (nats) of the weight vector normalized to sum 1;
    /// diagnostic only.
    pub fn entropy(&self) -> f64 {
        let mut weights: Vec<f64> = Vec::with_capacity(self.r_mem.len() + 1);
        weights.push(self.r_local.abs());
        weights.extend(self.r_mem.iter().map(|w| w.abs()));
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        -weights
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| {
                let p = w / total;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// One kNN hit with its per-layer (key, value) tensors already fetched.
#[derive(Debug, Clone)]
pub struct RetrievedMemory {
    pub entry_id: u64,
    pub distance: f32,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Combination ratios for `k` retrieved memories at the given distances.
///
/// Distances must be non-negative; they are clamped to `cfg.epsilon` before
/// use so an exact fingerprint match cannot divide by zero. The `k = 0` case
/// is handled by the caller (`fuse_attention` bypasses fusion entirely).
pub fn compute_fusion_weights(distances: &[f32], cfg: &BlockConfig) -> Result<FusionWeights> {
    cfg.validate()?;
    if let Some(d) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::Parameter {
            name: "distances",
            message: format!("must be non-negative and finite, got {d}"),
        });
    }
    let clamped: Vec<f64> = distances
        .iter()
        .map(|&d| (d as f64).max(cfg.epsilon))
        .collect();
    let r_mem = match cfg.fusion_mode {
        FusionMode::PaperLiteral => {
            let denom: f64 = clamped.iter().map(|d| cfg.r_local / d).sum();
            clamped.iter().map(|d| d / denom).collect()
        }
        FusionMode::NormalizedInverseDistance => {
            let inv: Vec<f64> = clamped.iter().map(|d| 1.0 / d).collect();
            let denom: f64 = inv.iter().sum();
            inv.iter().map(|i| (1.0 - cfg.r_local) * i / denom).collect()
        }
    };
    Ok(FusionWeights {
        r_local: cfg.r_local,
        r_mem,
        distances: clamped,
    })
}

/// Cross-attention of the local queries against one retrieved memory's
/// stored keys and values: `A_i`. Reuses the local Q projection, so the
/// memory path adds no parameters.
pub fn memory_attention_single(
    q: &Tensor,
    mem: &RetrievedMemory,
    num_heads: usize,
) -> Result<Tensor> {
    if mem.keys.cols() != q.cols() || mem.keys.shape() != mem.values.shape() {
        return Err(Error::BankIncompatible {
            bank: format!("keys {:?} values {:?}", mem.keys.shape(), mem.values.shape()),
            encoder: format!("queries {:?}", q.shape()),
        });
    }
    multi_head_attention(q, &mem.keys, &mem.values, num_heads)
}

/// Fused attention output `A_c = R_L * A_L + sum_i(R_i * A_i)`.
///
/// With no retrieved memories the local output is returned unchanged
/// (bitwise), not scaled by `R_L`; this preserves the dense-reduction
/// invariant when a bank is absent or empty.
pub fn fuse_attention(
    a_local: &Tensor,
    memories: &[RetrievedMemory],
    q: &Tensor,
    cfg: &BlockConfig,
    num_heads: usize,
) -> Result<Tensor> {
    if memories.is_empty() {
        return Ok(a_local.clone());
    }
    let distances: Vec<f32> = memories.iter().map(|m| m.distance).collect();
    let weights = compute_fusion_weights(&distances, cfg)?;
    let mut fused = a_local.scale(weights.r_local as f32);
    for (mem, &w) in memories.iter().zip(&weights.r_mem) {
        let a_i = memory_attention_single(q, mem, num_heads)?;
        if a_i.shape() != a_local.shape() {
            return Err(Error::DimensionMismatch {
                op: "fuse_attention",
                left: format!("{:?}", a_local.shape()),
                right: format!("{:?}", a_i.shape()),
            });
        }
        fused.add_scaled(&a_i, w as f32)?;
    }
    Ok(fused)
}

/// Retrieves the `k` nearest memories for `fingerprint` and fetches their
/// (key, value) tensors for `layer_id`.
pub fn retrieve_memories(
    memory: &dyn MemorySource,
    fingerprint: &[f32],
    k: usize,
    layer_id: u32,
) -> Result<Vec<RetrievedMemory>> {
    let hits = memory.knn_search(fingerprint, k)?;
    let mut memories = Vec::with_capacity(hits.len());
    for hit in hits {
        let (keys, values) = memory.fetch_layer(hit.entry_id, layer_id)?;
        memories.push(RetrievedMemory {
            entry_id: hit.entry_id,
            distance: hit.distance,
            keys,
            values,
        });
    }
    Ok(memories)
}

/// Transformer block with the memory plug-in: local attention as usual, kNN
/// retrieval against the bank, per-memory attention iterated once per hit,
/// ratio fusion, then the standard output projection / residual / FFN tail.
///
/// With no bank or `k = 0`, the output is bitwise identical to
/// `transformer_block` on the same input.
pub fn memorizing_block_forward(
    x: &Tensor,
    params: &BlockParams,
    memory: Option<&dyn MemorySource>,
    fingerprint: &[f32],
    layer_id: u32,
    cfg: &BlockConfig,
) -> Result<BlockActivations> {
    let (q, k, v, a_local) = block_attention_stage(x, params)?;
    let fused = match memory {
        Some(source) if cfg.k > 0 => {
            let memories = retrieve_memories(source, fingerprint, cfg.k, layer_id)?;
            fuse_attention(&a_local, &memories, &q, cfg, params.attention.num_heads)?
        }
        _ => a_local,
    };
    block_finish(x, params, q, k, v, &fused)
}

/// Parameter count of a memorizing block. Memory attention reuses the local
/// Q projection and operates on stored post-projection K/V, so the count is
/// exactly the dense block's count.
pub fn memorizing_parameter_count(params: &BlockParams, _cfg: &BlockConfig) -> u64 {
    params.parameter_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{dense_attention, transformer_block};
    use crate::prng::Prng;
    use crate::test_oracles;

    fn random_tensor(shape: Vec<usize>, prng: &mut Prng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| prng.uniform_f32() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn cfg(mode: FusionMode, r_local: f64) -> BlockConfig {
        BlockConfig {
            r_local,
            k: 3,
            fusion_mode: mode,
            epsilon: 1e-6,
        }
    }

    #[test]
    fn paper_literal_hand_example() {
        // R_L = 0.3, D = [1, 2]: sum(R_L / D_j) = 0.45, R = [2.2222, 4.4444]
        let w = compute_fusion_weights(&[1.0, 2.0], &cfg(FusionMode::PaperLiteral, 0.3)).unwrap();
        assert!((w.r_mem[0] - 2.2222).abs() < 1e-4);
        assert!((w.r_mem[1] - 4.4444).abs() < 1e-4);
    }

    #[test]
    fn normalized_hand_example() {
        let w = compute_fusion_weights(
            &[1.0, 2.0],
            &cfg(FusionMode::NormalizedInverseDistance, 0.3),
        )
        .unwrap();
        assert!((w.r_mem[0] - 0.46667).abs() < 1e-5);
        assert!((w.r_mem[1] - 0.23333).abs() < 1e-5);
        let total = w.r_local + w.r_mem.iter().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_distance_clamps_to_epsilon() {
        let w = compute_fusion_weights(
            &[0.0, 1.0],
            &cfg(FusionMode::NormalizedInverseDistance, 0.3),
        )
        .unwrap();
        assert_eq!(w.distances, vec![1e-6, 1.0]);
        assert!((w.r_mem[0] - 0.6999993).abs() < 1e-6);
        assert!((w.r_mem[1] - 7.0e-7).abs() < 1e-8);
    }

    #[test]
    fn negative_distance_rejected() {
        assert!(compute_fusion_weights(&[-0.5], &BlockConfig::default()).is_err());
    }

    #[test]
    fn nan_distance_rejected() {
        assert!(compute_fusion_weights(&[f32::NAN], &BlockConfig::default()).is_err());
    }

    #[test]
    fn empty_memories_bypass_is_bitwise() {
        let mut prng = Prng::new(21);
        let a_local = random_tensor(vec![4, 8], &mut prng);
        let q = random_tensor(vec![4, 8], &mut prng);
        let fused = fuse_attention(&a_local, &[], &q, &BlockConfig::default(), 2).unwrap();
        assert_eq!(fused.data(), a_local.data());
    }

    #[test]
    fn identical_memory_output_is_convex_fixed_point() {
        // one memory whose attention output equals A_L: weights sum to 1,
        // so the fusion returns A_L (within rounding)
        let mut prng = Prng::new(22);
        let q = random_tensor(vec![4, 8], &mut prng);
        let k = random_tensor(vec![4, 8], &mut prng);
        let v = random_tensor(vec![4, 8], &mut prng);
        let a_local = dense_attention(&q, &k, &v, 2).unwrap();
        let mem = RetrievedMemory {
            entry_id: 0,
            distance: 0.37,
            keys: k.clone(),
            values: v.clone(),
        };
        let fused = fuse_attention(
            &a_local,
            &[mem],
            &q,
            &cfg(FusionMode::NormalizedInverseDistance, 0.3),
            2,
        )
        .unwrap();
        for (a, b) in fused.data().iter().zip(a_local.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_memory_weights_are_distance_independent() {
        let mut prng = Prng::new(23);
        let q = random_tensor(vec![3, 8], &mut prng);
        let a_local = random_tensor(vec![3, 8], &mut prng);
        let keys = random_tensor(vec![5, 8], &mut prng);
        let values = random_tensor(vec![5, 8], &mut prng);
        for distance in [0.01f32, 1.0, 42.0] {
            let mem = RetrievedMemory {
                entry_id: 1,
                distance,
                keys: keys.clone(),
                values: values.clone(),
            };
            let fused = fuse_attention(
                &a_local,
                std::slice::from_ref(&mem),
                &q,
                &cfg(FusionMode::NormalizedInverseDistance, 0.3),
                2,
            )
            .unwrap();
            let a_1 = memory_attention_single(&q, &mem, 2).unwrap();
            for i in 0..fused.len() {
                let want = 0.3 * a_local.data()[i] + 0.7 * a_1.data()[i];
                assert!((fused.data()[i] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_memory_returns_its_value_row() {
        let mut prng = Prng::new(24);
        let q = random_tensor(vec![4, 8], &mut prng);
        let mem = RetrievedMemory {
            entry_id: 0,
            distance: 1.0,
            keys: random_tensor(vec![1, 8], &mut prng),
            values: random_tensor(vec![1, 8], &mut prng),
        };
        let out = memory_attention_single(&q, &mem, 2).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), mem.values.row(0));
        }
    }

    #[test]
    fn self_retrieval_reduces_to_dense_attention() {
        let mut prng = Prng::new(25);
        let q = random_tensor(vec![4, 8], &mut prng);
        let k = random_tensor(vec![4, 8], &mut prng);
        let v = random_tensor(vec![4, 8], &mut prng);
        let mem = RetrievedMemory {
            entry_id: 0,
            distance: 0.0,
            keys: k.clone(),
            values: v.clone(),
        };
        let via_memory = memory_attention_single(&q, &mem, 2).unwrap();
        let via_dense = dense_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(via_memory.data(), via_dense.data());
    }

    #[test]
    fn memory_attention_matches_scalar_reference() {
        let mut prng = Prng::new(26);
        let q = random_tensor(vec![3, 4], &mut prng);
        let mem = RetrievedMemory {
            entry_id: 0,
            distance: 1.0,
            keys: random_tensor(vec![6, 4], &mut prng),
            values: random_tensor(vec![6, 4], &mut prng),
        };
        let out = memory_attention_single(&q, &mem, 1).unwrap();
        let expect = test_oracles::attention_ref_cross(&q, &mem.keys, &mem.values, 1);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn memory_width_mismatch_is_bank_incompatibility() {
        let mut prng = Prng::new(27);
        let q = random_tensor(vec![3, 8], &mut prng);
        let mem = RetrievedMemory {
            entry_id: 0,
            distance: 1.0,
            keys: random_tensor(vec![2, 4], &mut prng),
            values: random_tensor(vec![2, 4], &mut prng),
        };
        let err = memory_attention_single(&q, &mem, 2).unwrap_err();
        assert!(matches!(err, Error::BankIncompatible { .. }));
    }

    #[test]
    fn no_memory_forward_is_bitwise_dense() {
        let mut prng = Prng::new(28);
        let params = BlockParams::init(8, 16, 2, &mut prng).unwrap();
        let x = random_tensor(vec![4, 8], &mut prng);
        let dense = transformer_block(&x, &params).unwrap();
        let cfg_k0 = BlockConfig {
            k: 0,
            ..BlockConfig::default()
        };
        let mem = memorizing_block_forward(&x, &params, None, &[], 0, &cfg_k0).unwrap();
        assert_eq!(mem.block_output.data(), dense.block_output.data());
        let mem2 =
            memorizing_block_forward(&x, &params, None, &[], 0, &BlockConfig::default()).unwrap();
        assert_eq!(mem2.block_output.data(), dense.block_output.data());
    }

    #[test]
    fn fused_output_stays_in_convex_hull() {
        // normalized mode: every element of A_c lies within the [min, max]
        // of the corresponding elements across A_L and all A_i
        let mut prng = Prng::new(29);
        let q = random_tensor(vec![4, 8], &mut prng);
        let a_local = random_tensor(vec![4, 8], &mut prng);
        let memories: Vec<RetrievedMemory> = (0..3)
            .map(|i| RetrievedMemory {
                entry_id: i,
                distance: 0.2 + i as f32,
                keys: random_tensor(vec![5, 8], &mut prng),
                values: random_tensor(vec![5, 8], &mut prng),
            })
            .collect();
        let cfg = cfg(FusionMode::NormalizedInverseDistance, 0.3);
        let fused = fuse_attention(&a_local, &memories, &q, &cfg, 2).unwrap();
        let outputs: Vec<Tensor> = memories
            .iter()
            .map(|m| memory_attention_single(&q, m, 2).unwrap())
            .collect();
        for i in 0..fused.len() {
            let mut lo = a_local.data()[i];
            let mut hi = a_local.data()[i];
            for out in &outputs {
                lo = lo.min(out.data()[i]);
                hi = hi.max(out.data()[i]);
            }
            let v = fused.data()[i];
            assert!(
                (lo - 1e-6..=hi + 1e-6).contains(&v),
                "element {i}: {v} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn fusion_mode_round_trips_through_strings() {
        for mode in [FusionMode::PaperLiteral, FusionMode::NormalizedInverseDistance] {
            assert_eq!(mode.to_string().parse::<FusionMode>().unwrap(), mode);
        }
        assert!("nonsense".parse::<FusionMode>().is_err());
    }

    #[test]
    fn entropy_of_degenerate_weights_is_zero() {
        let w = FusionWeights {
            r_local: 1.0,
            r_mem: vec![],
            distances: vec![],
        };
        assert_eq!(w.entropy(), 0.0);
    }
}
