//! Toy volumetric ViT encoder with per-layer plug-in slots for memorizing
//! blocks and a fingerprint tap for retrieval.
//!
//! Weights are frozen at seeded random initialization; what makes retrieval
//! meaningful is that bank fingerprints and query fingerprints come from the
//! same function. The weight file uses the same container conventions as the
//! bank format: magic `"MSAMENC1"`, version, a little-endian header carrying
//! the full [`EncoderConfig`], then f32 payloads in a documented order
//! (patch projection, patch bias, then per layer: w_q, w_k, w_v, w_o, w1,
//! w2, norm1 scale/shift, norm2 scale/shift).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{transformer_block, BlockActivations, BlockParams, WEIGHT_INIT_STD};
use crate::bank::{BankHeader, MemorySource};
use crate::error::{Error, Result};
use crate::fusion::{memorizing_block_forward, BlockConfig};
use crate::prng::{init_gaussian, Prng};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const ENCODER_MAGIC: [u8; 8] = *b"MSAMENC1";
pub const ENCODER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Volume dimensions (D, H, W); each must be divisible by `patch_size`.
    pub volume_dims: [usize; 3],
    pub patch_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Layer indices hosting memorizing blocks; subset of `0..num_layers`.
    pub memorizing_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Toy geometry: 32^3 volume, patch 8 (64 tokens), d_model 64, d_ff 256,
    /// 4 heads, 4 layers, memorizing layer {2}.
    fn default() -> Self {
        EncoderConfig {
            volume_dims: [32, 32, 32],
            patch_size: 8,
            d_model: 64,
            d_ff: 256,
            num_heads: 4,
            num_layers: 4,
            memorizing_layers: vec![2],
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.volume_dims.iter().any(|&d| d == 0 || d % p != 0) {
            return Err(Error::Config(format!(
                "patch size {} must divide volume dims {:?}",
                p, self.volume_dims
            )));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "num_heads {} must divide d_model {}",
                self.num_heads, self.d_model
            )));
        }
        if self.d_ff == 0 || self.num_layers == 0 {
            return Err(Error::Config("d_ff and num_layers must be positive".into()));
        }
        if let Some(&bad) = self
            .memorizing_layers
            .iter()
            .find(|&&l| l >= self.num_layers)
        {
            return Err(Error::Config(format!(
                "memorizing layer {bad} out of range (num_layers {})",
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        let p = self.patch_size;
        (self.volume_dims[0] / p) * (self.volume_dims[1] / p) * (self.volume_dims[2] / p)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }

    /// Sorted, deduplicated memorizing layers.
    pub fn memorized_layer_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.memorizing_layers.iter().map(|&l| l as u32).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Geometry header for banks built from (and searched by) this encoder.
    pub fn bank_geometry(&self) -> BankHeader {
        BankHeader::new_geometry(
            self.d_model as u32,
            self.memorized_layer_ids(),
            self.n_tokens() as u32,
            self.num_heads as u32,
            self.d_model as u32,
        )
    }

    pub fn geometry_string(&self) -> String {
        format!(
            "fingerprint_dim={} layers={:?} n_tokens={} num_heads={} d_model={}",
            self.d_model,
            self.memorized_layer_ids(),
            self.n_tokens(),
            self.num_heads,
            self.d_model
        )
    }
}

/// Frozen encoder weights plus the config they were built for.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// `[patch_size^3 x d_model]` linear patch projection.
    pub patch_proj: Tensor,
    /// `[1 x d_model]` bias added to every projected patch.
    pub patch_bias: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl EncoderWeights {
    /// Deterministic initialization from `config.seed`; draw order is fixed
    /// (patch projection, patch bias, then blocks in layer order) so the
    /// same config always yields bit-identical weights.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut prng = Prng::new(config.seed);
        let patch_proj = init_gaussian(
            vec![config.patch_voxels(), config.d_model],
            &mut prng,
            WEIGHT_INIT_STD,
        )?;
        let patch_bias = init_gaussian(vec![1, config.d_model], &mut prng, WEIGHT_INIT_STD)?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(BlockParams::init(
                config.d_model,
                config.d_ff,
                config.num_heads,
                &mut prng,
            )?);
        }
        Ok(EncoderWeights {
            config: config.clone(),
            patch_proj,
            patch_bias,
            blocks,
        })
    }

    /// Total trainable scalar count of the encoder (patch embed + blocks).
    pub fn parameter_count(&self) -> u64 {
        let patch = (self.patch_proj.len() + self.patch_bias.len()) as u64;
        patch + self.blocks.iter().map(BlockParams::parameter_count).sum::<u64>()
    }

    fn ordered_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_proj, &self.patch_bias];
        for b in &self.blocks {
            out.extend([
                &b.attention.w_q,
                &b.attention.w_k,
                &b.attention.w_v,
                &b.attention.w_o,
                &b.ffn.w1,
                &b.ffn.w2,
            ]);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let tmp = tempfile::NamedTempFile::new_in(parent.unwrap_or(Path::new(".")))
            .map_err(|e| Error::io(path, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            let io = |e| Error::io(path, e);
            let mut u32s: Vec<u32> = vec![ENCODER_VERSION];
            u32s.extend(self.config.volume_dims.iter().map(|&d| d as u32));
            u32s.extend([
                self.config.patch_size as u32,
                self.config.d_model as u32,
                self.config.d_ff as u32,
                self.config.num_heads as u32,
                self.config.num_layers as u32,
                self.config.memorizing_layers.len() as u32,
            ]);
            u32s.extend(self.config.memorizing_layers.iter().map(|&l| l as u32));
            w.write_all(&ENCODER_MAGIC).map_err(io)?;
            for v in u32s {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.write_all(&self.config.seed.to_le_bytes()).map_err(io)?;
            for t in self.ordered_tensors() {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
            for b in &self.blocks {
                for norm in [&b.norm1, &b.norm2] {
                    for v in norm.scale.iter().chain(&norm.shift) {
                        w.write_all(&v.to_le_bytes()).map_err(io)?;
                    }
                }
            }
            w.flush().map_err(io)?;
        }
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != ENCODER_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("bad encoder magic {magic:?}"),
            });
        }
        let u32_of = |r: &mut BufReader<std::fs::File>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_of(&mut r)?;
        if version != ENCODER_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported encoder version {version}"),
            });
        }
        let d = u32_of(&mut r)? as usize;
        let h = u32_of(&mut r)? as usize;
        let w_ = u32_of(&mut r)? as usize;
        let patch_size = u32_of(&mut r)? as usize;
        let d_model = u32_of(&mut r)? as usize;
        let d_ff = u32_of(&mut r)? as usize;
        let num_heads = u32_of(&mut r)? as usize;
        let num_layers = u32_of(&mut r)? as usize;
        let mem_count = u32_of(&mut r)? as usize;
        let mut memorizing_layers = Vec::with_capacity(mem_count);
        for _ in 0..mem_count {
            memorizing_layers.push(u32_of(&mut r)? as usize);
        }
        let mut seed_bytes = [0u8; 8];
        r.read_exact(&mut seed_bytes).map_err(io)?;
        let config = EncoderConfig {
            volume_dims: [d, h, w_],
            patch_size,
            d_model,
            d_ff,
            num_heads,
            num_layers,
            memorizing_layers,
            seed: u64::from_le_bytes(seed_bytes),
        };
        config.validate()?;

        let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(shape, data)
        };
        let patch_proj = read_tensor(vec![config.patch_voxels(), d_model])?;
        let patch_bias = read_tensor(vec![1, d_model])?;
        let mut blocks = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let w_q = read_tensor(vec![d_model, d_model])?;
            let w_k = read_tensor(vec![d_model, d_model])?;
            let w_v = read_tensor(vec![d_model, d_model])?;
            let w_o = read_tensor(vec![d_model, d_model])?;
            let w1 = read_tensor(vec![d_model, d_ff])?;
            let w2 = read_tensor(vec![d_ff, d_model])?;
            blocks.push(BlockParams {
                attention: crate::attention::AttentionParams {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    num_heads,
                },
                ffn: crate::attention::FfnParams { w1, w2 },
                norm1: crate::attention::LayerNormParams::identity(d_model),
                norm2: crate::attention::LayerNormParams::identity(d_model),
            });
        }
        for block in &mut blocks {
            for norm in [&mut block.norm1, &mut block.norm2] {
                let scale = read_tensor(vec![1, d_model])?;
                let shift = read_tensor(vec![1, d_model])?;
                norm.scale = scale.into_data();
                norm.shift = shift.into_data();
            }
        }
        Ok(EncoderWeights {
            config,
            patch_proj,
            patch_bias,
            blocks,
        })
    }
}

/// Per-image retrieval vector: token mean, L2-normalized. A zero-mean input
/// has no direction to normalize; it maps to the zero vector and is flagged.
#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub values: Vec<f32>,
    pub is_degenerate: bool,
}

pub fn fingerprint(tokens: &Tensor) -> Fingerprint {
    let (n, d) = (tokens.rows(), tokens.cols());
    let mut mean = vec![0.0f32; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f32;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-12 {
        return Fingerprint {
            values: vec![0.0; d],
            is_degenerate: true,
        };
    }
    for m in mean.iter_mut() {
        *m /= norm;
    }
    Fingerprint {
        values: mean,
        is_degenerate: false,
    }
}

/// Fixed 3-D sinusoidal positional encoding. `d_model` is split into three
/// chunks (one per axis, remainder to the last); within a chunk of size `s`,
/// feature `i` at grid position `pos` is `sin(pos * f)` for even `i` and
/// `cos(pos * f)` for odd `i`, with `f = 10000^(-2*(i/2)/s)`.
fn positional_encoding(grid: [usize; 3], d_model: usize) -> Tensor {
    let n = grid[0] * grid[1] * grid[2];
    let base = d_model / 3;
    let chunks = [base, base, d_model - 2 * base];
    let mut out = Tensor::zeros(vec![n, d_model]);
    let mut t = 0usize;
    for pz in 0..grid[0] {
        for py in 0..grid[1] {
            for px in 0..grid[2] {
                let coords = [pz, py, px];
                let row = &mut out.data_mut()[t * d_model..(t + 1) * d_model];
                let mut offset = 0usize;
                for (axis, &size) in chunks.iter().enumerate() {
                    let pos = coords[axis] as f32;
                    for i in 0..size {
                        let freq = 10000f32.powf(-(2.0 * (i / 2) as f32) / size as f32);
                        row[offset + i] = if i % 2 == 0 {
                            (pos * freq).sin()
                        } else {
                            (pos * freq).cos()
                        };
                    }
                    offset += size;
                }
                t += 1;
            }
        }
    }
    out
}

/// Non-overlapping `p^3` patches, flattened row-major (z, y, x within the
/// patch), linearly projected, bias added, positional encoding added.
pub fn patch_embed(volume: &Volume, weights: &EncoderWeights) -> Result<Tensor> {
    let cfg = &weights.config;
    if volume.dims != cfg.volume_dims {
        return Err(Error::DimensionMismatch {
            op: "patch_embed",
            left: format!("{:?}", volume.dims),
            right: format!("{:?}", cfg.volume_dims),
        });
    }
    let p = cfg.patch_size;
    let grid = [
        cfg.volume_dims[0] / p,
        cfg.volume_dims[1] / p,
        cfg.volume_dims[2] / p,
    ];
    let n = cfg.n_tokens();
    let pv = cfg.patch_voxels();
    let mut patches = Tensor::zeros(vec![n, pv]);
    let mut t = 0usize;
    for pz in 0..grid[0] {
        for py in 0..grid[1] {
            for px in 0..grid[2] {
                let row = &mut patches.data_mut()[t * pv..(t + 1) * pv];
                let mut i = 0usize;
                for dz in 0..p {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[i] = volume.voxel(pz * p + dz, py * p + dy, px * p + dx);
                            i += 1;
                        }
                    }
                }
                t += 1;
            }
        }
    }
    let mut tokens = crate::tensor::matmul(&patches, &weights.patch_proj)?;
    let bias = weights.patch_bias.row(0);
    let d = cfg.d_model;
    for i in 0..n {
        let row = &mut tokens.data_mut()[i * d..(i + 1) * d];
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    tokens.add(&positional_encoding(grid, d))
}

/// Output of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub features: Tensor,
    pub activations: Vec<BlockActivations>,
    pub fingerprint: Fingerprint,
}

fn check_bank_compat(cfg: &EncoderConfig, header: &BankHeader) -> Result<()> {
    let wanted = cfg.bank_geometry();
    let layers_ok = wanted
        .layer_ids
        .iter()
        .all(|id| header.layer_ids.contains(id));
    if header.fingerprint_dim != wanted.fingerprint_dim
        || header.n_tokens != wanted.n_tokens
        || header.num_heads != wanted.num_heads
        || header.d_model != wanted.d_model
        || !layers_ok
    {
        return Err(Error::BankIncompatible {
            bank: header.geometry_string(),
            encoder: cfg.geometry_string(),
        });
    }
    Ok(())
}

/// Full encoder forward pass: patch embedding, one fingerprint computation,
/// then `num_layers` blocks. Layers in `memorizing_layers` retrieve from
/// `memory` (when present); the rest run the plain dense block. The bank
/// geometry is validated against the config before any block runs.
pub fn encode(
    volume: &Volume,
    weights: &EncoderWeights,
    memory: Option<&dyn MemorySource>,
    block_cfg: &BlockConfig,
) -> Result<EncodeOutput> {
    let cfg = &weights.config;
    cfg.validate()?;
    block_cfg.validate()?;
    if let Some(source) = memory {
        check_bank_compat(cfg, source.header())?;
    }
    let tokens = patch_embed(volume, weights)?;
    let fp = fingerprint(&tokens);
    let memorized = cfg.memorized_layer_ids();
    let mut activations = Vec::with_capacity(cfg.num_layers);
    let mut x = tokens;
    for layer in 0..cfg.num_layers {
        let params = &weights.blocks[layer];
        let acts = if memorized.contains(&(layer as u32)) {
            memorizing_block_forward(&x, params, memory, &fp.values, layer as u32, block_cfg)?
        } else {
            transformer_block(&x, params)?
        };
        x = acts.block_output.clone();
        activations.push(acts);
    }
    Ok(EncodeOutput {
        features: x,
        activations,
        fingerprint: fp,
    })
}
