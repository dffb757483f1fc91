//! Run configuration resolution. Precedence, lowest to highest: built-in
//! defaults, `--config` JSON file, the `MEMATTN_CACHE_CAP` environment
//! variable (cache capacity only), explicit flags. The fully resolved
//! configuration is echoed to stderr before any computation so runs are
//! reproducible from their logs.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use memattn_core::bank::DEFAULT_CACHE_CAPACITY;
use memattn_core::error::{Error, Result};
use memattn_core::fusion::{BlockConfig, FusionMode};

pub const CACHE_CAP_ENV: &str = "MEMATTN_CACHE_CAP";

/// Flags shared by every retrieval-capable command.
#[derive(Debug, Args)]
pub struct BlockOptions {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// kNN breadth (memories retrieved per image).
    #[arg(long)]
    pub k: Option<usize>,
    /// Preset local-attention ratio in [0, 1].
    #[arg(long = "r-local")]
    pub r_local: Option<f64>,
    /// Fusion mode: normalized-inverse-distance or paper-literal.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Distance clamp applied before fusion weighting.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Payload cache capacity, in entries.
    #[arg(long = "cache-cap")]
    pub cache_cap: Option<usize>,
}

/// Optional values accepted from a `--config` JSON file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub encoder: Option<PathBuf>,
    pub banks: Option<Vec<PathBuf>>,
    pub k: Option<usize>,
    pub r_local: Option<f64>,
    pub fusion: Option<String>,
    pub epsilon: Option<f64>,
    pub cache_capacity: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &PathBuf) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!(
            "invalid config file {}: {e}",
            path.display()
        )))
    }
}

/// Fully resolved run configuration, echoed at startup.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub encoder: Option<PathBuf>,
    pub banks: Vec<PathBuf>,
    pub r_local: f64,
    pub k: usize,
    pub fusion_mode: FusionMode,
    pub epsilon: f64,
    pub cache_capacity: usize,
    pub seed: Option<u64>,
}

impl ResolvedConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            r_local: self.r_local,
            k: self.k,
            fusion_mode: self.fusion_mode,
            epsilon: self.epsilon,
        }
    }

    pub fn echo(&self) {
        let json = serde_json::to_string(self).expect("resolved config serializes");
        eprintln!("resolved config: {json}");
    }
}

pub fn resolve(
    opts: &BlockOptions,
    banks_flag: &[PathBuf],
    encoder_flag: Option<&PathBuf>,
    seed_flag: Option<u64>,
) -> Result<ResolvedConfig> {
    let file = match &opts.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let env_cache_cap = match std::env::var(CACHE_CAP_ENV) {
        Ok(raw) => Some(raw.parse::<usize>().map_err(|_| {
            Error::Config(format!("{CACHE_CAP_ENV}={raw} is not a valid capacity"))
        })?),
        Err(_) => None,
    };
    let fusion_name = opts
        .fusion
        .clone()
        .or(file.fusion)
        .unwrap_or_else(|| FusionMode::default().to_string());
    let resolved = ResolvedConfig {
        encoder: encoder_flag.cloned().or(file.encoder),
        banks: if banks_flag.is_empty() {
            file.banks.unwrap_or_default()
        } else {
            banks_flag.to_vec()
        },
        r_local: opts
            .r_local
            .or(file.r_local)
            .unwrap_or(memattn_core::fusion::DEFAULT_R_LOCAL),
        k: opts.k.or(file.k).unwrap_or(memattn_core::fusion::DEFAULT_K),
        fusion_mode: fusion_name.parse()?,
        epsilon: opts
            .epsilon
            .or(file.epsilon)
            .unwrap_or(memattn_core::fusion::DEFAULT_EPSILON),
        cache_capacity: opts
            .cache_cap
            .or(env_cache_cap)
            .or(file.cache_capacity)
            .unwrap_or(DEFAULT_CACHE_CAPACITY),
        seed: seed_flag.or(file.seed),
    };
    resolved.block_config().validate()?;
    if resolved.cache_capacity == 0 {
        return Err(Error::Config("cache capacity must be at least 1".into()));
    }
    Ok(resolved)
}
