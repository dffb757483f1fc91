//! Efficiency accounting and the k ablation harness.
//!
//! FLOPs are reported twice. `parametric` counts multiply-accumulates (x2)
//! of every learned-weight matmul plus local attention, plus the documented
//! norm cost below; it is invariant to the memory mechanism. `total`
//! additionally counts the k per-memory attentions. The formulas, all per
//! forward pass over `n` tokens of width `d`:
//!
//! * patch embedding: `2*n*p^3*d + 2*n*d` (projection, then bias and
//!   positional adds);
//! * per block: projections `4 * 2*n*d*d`, FFN `2 * 2*n*d*d_ff`, local
//!   attention scores+mix `2 * 2*n*n*d`, two layer norms at `8*n*d` each;
//! * per retrieved memory, per memorizing layer: `2 * 2*n*n_mem*d`
//!   (scores against stored keys, mix with stored values).
//!
//! Activation functions and the scalar fusion weighting are excluded.
//! Latency is wall-clock from a monotonic clock, single-threaded, with
//! warmup runs excluded; absolute times are hardware-specific and only
//! paired comparisons on identical inputs are meaningful.

use std::time::Instant;

use serde::Serialize;

use crate::bank::MemorySource;
use crate::encoder::{encode, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::fusion::{compute_fusion_weights, BlockConfig};
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Layer-norm cost per element (mean, variance, normalize, scale, shift).
pub const NORM_FLOPS_PER_ELEM: u64 = 8;

pub fn projection_flops(n: u64, d: u64) -> u64 {
    4 * 2 * n * d * d
}

pub fn ffn_flops(n: u64, d: u64, d_ff: u64) -> u64 {
    2 * 2 * n * d * d_ff
}

pub fn local_attention_flops(n: u64, d: u64) -> u64 {
    2 * 2 * n * n * d
}

pub fn norm_flops(n: u64, d: u64) -> u64 {
    2 * NORM_FLOPS_PER_ELEM * n * d
}

pub fn patch_embed_flops(n: u64, patch_voxels: u64, d: u64) -> u64 {
    2 * n * patch_voxels * d + 2 * n * d
}

/// Cost of attending to one retrieved memory of `n_mem` tokens.
pub fn memory_attention_flops(n: u64, n_mem: u64, d: u64) -> u64 {
    2 * 2 * n * n_mem * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub parametric: u64,
    pub total: u64,
}

/// Analytic FLOP count for one encoder forward pass. `parametric` is
/// invariant to `block_cfg.k`; `total` adds the memory attentions performed
/// at each memorizing layer.
pub fn count_flops(cfg: &EncoderConfig, block_cfg: &BlockConfig, n_mem_tokens: u64) -> FlopCounts {
    let n = cfg.n_tokens() as u64;
    let d = cfg.d_model as u64;
    let d_ff = cfg.d_ff as u64;
    let per_block =
        projection_flops(n, d) + ffn_flops(n, d, d_ff) + local_attention_flops(n, d) + norm_flops(n, d);
    let parametric =
        patch_embed_flops(n, cfg.patch_voxels() as u64, d) + cfg.num_layers as u64 * per_block;
    let memorizing_layers = cfg.memorized_layer_ids().len() as u64;
    let memory = memorizing_layers * block_cfg.k as u64 * memory_attention_flops(n, n_mem_tokens, d);
    FlopCounts {
        parametric,
        total: parametric + memory,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

/// Times `run` with a monotonic clock: `warmup` unrecorded runs, then
/// `repetitions` measured ones.
pub fn time_inference<F: FnMut()>(mut run: F, repetitions: usize, warmup: usize) -> Result<LatencyStats> {
    if repetitions == 0 {
        return Err(Error::Parameter {
            name: "repetitions",
            message: "must be at least 1".into(),
        });
    }
    for _ in 0..warmup {
        run();
    }
    let mut samples_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        run();
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    samples_ms.sort_by(f64::total_cmp);
    let n = samples_ms.len();
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        samples_ms[n / 2]
    } else {
        (samples_ms[n / 2 - 1] + samples_ms[n / 2]) / 2.0
    };
    let p95 = samples_ms[((n as f64 * 0.95).ceil() as usize).max(1) - 1];
    Ok(LatencyStats {
        mean_ms: mean,
        median_ms: median,
        p95_ms: p95,
        samples: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Dense,
    Memorizing,
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    pub mode: BenchMode,
    pub k: usize,
    pub latency: LatencyStats,
    pub parametric_flops: u64,
    pub total_flops_incl_memory: u64,
    pub params: u64,
    pub peak_cache_bytes: u64,
    pub bytes_read: u64,
}

/// Paired-comparison measurement of one mode on one volume. Dense mode is
/// `memory = None` (the bank is never opened, let alone read).
pub fn measure_efficiency(
    volume: &Volume,
    weights: &EncoderWeights,
    memory: Option<&dyn MemorySource>,
    block_cfg: &BlockConfig,
    repetitions: usize,
    warmup: usize,
) -> Result<EfficiencyReport> {
    let memorizing = memory.is_some() && block_cfg.k > 0;
    let mut encode_err = None;
    let latency = time_inference(
        || {
            if let Err(e) = encode(volume, weights, memory, block_cfg) {
                encode_err.get_or_insert(e);
            }
        },
        repetitions,
        warmup,
    )?;
    if let Some(e) = encode_err {
        return Err(e);
    }
    let n_mem = memory.map_or(0, |m| m.header().n_tokens as u64);
    let effective_cfg = if memorizing {
        block_cfg.clone()
    } else {
        BlockConfig {
            k: 0,
            ..block_cfg.clone()
        }
    };
    let flops = count_flops(&weights.config, &effective_cfg, n_mem);
    let (peak_cache_bytes, bytes_read) = match memory {
        Some(m) => {
            let stats = m.io_stats();
            (stats.peak_resident_bytes, stats.bytes_read)
        }
        None => (0, 0),
    };
    Ok(EfficiencyReport {
        mode: if memorizing {
            BenchMode::Memorizing
        } else {
            BenchMode::Dense
        },
        k: effective_cfg.k,
        latency,
        parametric_flops: flops.parametric,
        total_flops_incl_memory: flops.total,
        params: weights.parameter_count(),
        peak_cache_bytes,
        bytes_read,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub k: usize,
    /// CRC-32 of the little-endian feature bytes; deterministic per
    /// (input, bank, config).
    pub checksum: u32,
    pub mean_latency_ms: f64,
    pub mean_fusion_entropy: f64,
}

/// CRC-32 of a tensor's f32 little-endian bytes, the checksum used by
/// ablation rows and output cross-checks.
pub fn feature_checksum(features: &Tensor) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for v in features.data() {
        hasher.update(&v.to_le_bytes());
    }
    hasher.finalize()
}

/// Runs the k ablation: one row per requested k, identical inputs across
/// rows, rows sorted by k. The bank must hold at least `max(k_values)`
/// entries.
pub fn run_ablation(
    k_values: &[usize],
    volume: &Volume,
    weights: &EncoderWeights,
    memory: &dyn MemorySource,
    base_cfg: &BlockConfig,
    repetitions: usize,
    warmup: usize,
) -> Result<Vec<AblationRow>> {
    if k_values.is_empty() {
        return Err(Error::Parameter {
            name: "k_values",
            message: "must not be empty".into(),
        });
    }
    let max_k = *k_values.iter().max().expect("non-empty");
    if (memory.entry_count() as usize) < max_k {
        return Err(Error::Parameter {
            name: "k_values",
            message: format!(
                "bank holds {} entries but max k is {max_k}",
                memory.entry_count()
            ),
        });
    }
    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let cfg = BlockConfig {
            k,
            ..base_cfg.clone()
        };
        let output = encode(volume, weights, Some(memory), &cfg)?;
        let checksum = feature_checksum(&output.features);
        let entropy = if k == 0 {
            0.0
        } else {
            let hits = memory.knn_search(&output.fingerprint.values, k)?;
            let distances: Vec<f32> = hits.iter().map(|h| h.distance).collect();
            compute_fusion_weights(&distances, &cfg)?.entropy()
        };
        let mut encode_err = None;
        let latency = time_inference(
            || {
                if let Err(e) = encode(volume, weights, Some(memory), &cfg) {
                    encode_err.get_or_insert(e);
                }
            },
            repetitions,
            warmup,
        )?;
        if let Some(e) = encode_err {
            return Err(e);
        }
        rows.push(AblationRow {
            k,
            checksum,
            mean_latency_ms: latency.mean_ms,
            mean_fusion_entropy: entropy,
        });
    }
    Ok(rows)
}

/// CSV rendering of ablation rows: header then one row per configuration.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("k,checksum,mean_latency_ms,mean_fusion_entropy\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:08x},{:.6},{:.6}\n",
            row.k, row.checksum, row.mean_latency_ms, row.mean_fusion_entropy
        ));
    }
    out
}
