use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use memattn_core::bank::{BankHandle, BankSet};
use memattn_core::bench::{
    ablation_csv, feature_checksum, measure_efficiency, run_ablation, EfficiencyReport,
};
use memattn_core::builder::{build_all, ClassBuildOutcome, ClassDatasetManifest};
use memattn_core::encoder::{encode, EncoderConfig, EncoderWeights};
use memattn_core::error::Error;
use memattn_core::tensor::Tensor;
use memattn_core::volume::Volume;

use crate::config::{resolve, BlockOptions, FileConfig};
use crate::Failure;

type CmdResult = Result<(), Failure>;

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// Volume dimensions D,H,W.
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long = "d-model", default_value_t = 64)]
    pub d_model: usize,
    #[arg(long = "d-ff", default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Encoder layers hosting memorizing blocks.
    #[arg(long = "memorizing-layers", value_delimiter = ',', default_value = "2")]
    pub memorizing_layers: Vec<usize>,
}

impl GeometryArgs {
    fn to_config(&self, seed: u64) -> Result<EncoderConfig, Error> {
        if self.dims.len() != 3 {
            return Err(Error::Config(format!(
                "--dims expects D,H,W (3 values), got {:?}",
                self.dims
            )));
        }
        let cfg = EncoderConfig {
            volume_dims: [self.dims[0], self.dims[1], self.dims[2]],
            patch_size: self.patch,
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_heads: self.heads,
            num_layers: self.layers,
            memorizing_layers: self.memorizing_layers.clone(),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Error> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_encoder(
    encoder: Option<&PathBuf>,
    seed: Option<u64>,
    geometry: &GeometryArgs,
) -> Result<EncoderWeights, Error> {
    match (encoder, seed) {
        (Some(path), _) => {
            require_file(path, "encoder weight file")?;
            EncoderWeights::load(path)
        }
        (None, Some(seed)) => EncoderWeights::init(&geometry.to_config(seed)?),
        (None, None) => Err(Error::Config(
            "provide --encoder <file> or --encoder-seed <seed>".into(),
        )),
    }
}

/// Inference-side commands take weights from a file only (its embedded
/// config is authoritative).
fn load_encoder_file(encoder: Option<&PathBuf>) -> Result<EncoderWeights, Error> {
    let path = encoder.ok_or_else(|| {
        Error::Config("provide --encoder <file> (or set \"encoder\" in --config)".into())
    })?;
    require_file(path, "encoder weight file")?;
    EncoderWeights::load(path)
}

fn open_memory(banks: &[PathBuf], capacity: usize) -> Result<BankSet, Error> {
    for bank in banks {
        require_file(bank, "bank file")?;
    }
    BankSet::open_with_capacity(banks, capacity)
}

/// All output files go through a temp sibling plus rename; a failed command
/// never leaves a partial file behind.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = tempfile::NamedTempFile::new_in(parent.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    tmp.as_file()
        .write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_features(path: &Path, features: &Tensor) -> Result<(), Error> {
    let mut bytes = Vec::with_capacity(features.len() * 4);
    for v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    let sidecar = json!({
        "shape": features.shape(),
        "crc32": format!("{:08x}", feature_checksum(features)),
    });
    let mut sidecar_path = path.as_os_str().to_owned();
    sidecar_path.push(".json");
    atomic_write(Path::new(&sidecar_path), sidecar.to_string().as_bytes())?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub geometry: GeometryArgs,
}

pub fn gen_weights(args: GenWeightsArgs) -> CmdResult {
    let cfg = args.geometry.to_config(args.seed)?;
    let weights = EncoderWeights::init(&cfg)?;
    weights.save(&args.out)?;
    println!(
        "wrote encoder weights to {} ({} parameters, {} tokens)",
        args.out.display(),
        weights.parameter_count(),
        cfg.n_tokens()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenVolumeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Volume dimensions D,H,W.
    #[arg(long, value_delimiter = ',', default_value = "32,32,32")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn gen_volume(args: GenVolumeArgs) -> CmdResult {
    if args.dims.len() != 3 {
        return Err(Error::Config(format!(
            "--dims expects D,H,W (3 values), got {:?}",
            args.dims
        ))
        .into());
    }
    let volume = Volume::random([args.dims[0], args.dims[1], args.dims[2]], args.seed)?;
    volume.save(&args.out)?;
    println!("wrote volume {:?} to {}", volume.dims, args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildBankArgs {
    /// Class manifest JSON; repeat for multi-class builds.
    #[arg(long, required = true)]
    pub manifest: Vec<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Initialize frozen weights from this seed instead of a weight file.
    #[arg(long = "encoder-seed")]
    pub encoder_seed: Option<u64>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Output bank path (single manifest only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output directory for class_<id>.msb files.
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// Also write the build report JSON to this path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// JSON config file supplying encoder path or seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn build_bank(args: BuildBankArgs) -> CmdResult {
    let file_cfg = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let encoder_path = args.encoder.clone().or(file_cfg.encoder);
    let seed = args.encoder_seed.or(file_cfg.seed);
    let weights = load_encoder(encoder_path.as_ref(), seed, &args.geometry)?;

    let mut manifests = Vec::with_capacity(args.manifest.len());
    for path in &args.manifest {
        require_file(path, "manifest file")?;
        manifests.push(ClassDatasetManifest::load(path)?);
    }

    let outcomes = match (&args.out, &args.out_dir, manifests.len()) {
        (Some(out), None, 1) => {
            match memattn_core::builder::build_bank(&manifests[0], &weights, out) {
                Ok(report) => vec![ClassBuildOutcome::Ok(report)],
                Err(e) if e.is_validation() => return Err(e.into()),
                Err(e) => vec![ClassBuildOutcome::Failed {
                    class_id: manifests[0].class_id,
                    error: e.to_string(),
                }],
            }
        }
        (Some(_), None, n) => {
            return Err(Error::Config(format!(
                "--out takes exactly one manifest, got {n}; use --out-dir"
            ))
            .into());
        }
        (None, Some(dir), _) => build_all(&manifests, &weights, dir)?,
        (None, None, _) | (Some(_), Some(_), _) => {
            return Err(Error::Config(
                "provide exactly one of --out (single manifest) or --out-dir".into(),
            )
            .into());
        }
    };

    let report_json =
        serde_json::to_string_pretty(&outcomes).expect("build reports serialize");
    println!("{report_json}");
    if let Some(path) = &args.report {
        atomic_write(path, report_json.as_bytes())?;
    }
    let failed: Vec<u32> = outcomes
        .iter()
        .filter_map(|o| match o {
            ClassBuildOutcome::Failed { class_id, .. } => Some(*class_id),
            ClassBuildOutcome::Ok(_) => None,
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("bank build failed for classes {failed:?}"),
        })
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Input volume (.vol container, or raw f32 with a .json sidecar).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Memory bank(s); comma-separated or repeated. Multiple banks are
    /// searched as one merged index.
    #[arg(long = "bank", value_delimiter = ',')]
    pub banks: Vec<PathBuf>,
    /// Force the dense path: k = 0 and banks are never opened.
    #[arg(long)]
    pub dense: bool,
    /// Feature output path (f32 little-endian, with a .json sidecar).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub block: BlockOptions,
}

pub fn infer(args: InferArgs) -> CmdResult {
    let mut resolved = resolve(&args.block, &args.banks, args.encoder.as_ref(), None)?;
    if args.dense {
        resolved.k = 0;
        resolved.banks.clear();
    }
    resolved.echo();
    let weights = load_encoder_file(resolved.encoder.as_ref())?;
    require_file(&args.input, "input volume")?;
    let volume = Volume::load(&args.input)?;
    if resolved.k > 0 && resolved.banks.is_empty() {
        return Err(Error::Config(
            "k > 0 but no banks given; pass --bank <file> or --dense".into(),
        )
        .into());
    }
    let block_cfg = resolved.block_config();
    let output = if resolved.banks.is_empty() {
        encode(&volume, &weights, None, &block_cfg)?
    } else {
        let memory = open_memory(&resolved.banks, resolved.cache_capacity)?;
        encode(&volume, &weights, Some(&memory), &block_cfg)?
    };
    write_features(&args.out, &output.features)?;
    println!(
        "wrote features {:?} to {} (crc32 {:08x})",
        output.features.shape(),
        args.out.display(),
        feature_checksum(&output.features)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchModeArg {
    Dense,
    Memorizing,
    Both,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long = "bank", value_delimiter = ',')]
    pub banks: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = BenchModeArg::Both)]
    pub mode: BenchModeArg,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub block: BlockOptions,
}

pub fn bench(args: BenchArgs) -> CmdResult {
    let resolved = resolve(&args.block, &args.banks, args.encoder.as_ref(), None)?;
    resolved.echo();
    let weights = load_encoder_file(resolved.encoder.as_ref())?;
    require_file(&args.input, "input volume")?;
    let volume = Volume::load(&args.input)?;
    let block_cfg = resolved.block_config();

    let mut reports: Vec<EfficiencyReport> = Vec::new();
    if matches!(args.mode, BenchModeArg::Dense | BenchModeArg::Both) {
        // dense mode never opens a bank
        reports.push(measure_efficiency(
            &volume,
            &weights,
            None,
            &block_cfg,
            args.reps,
            args.warmup,
        )?);
    }
    if matches!(args.mode, BenchModeArg::Memorizing | BenchModeArg::Both) {
        if resolved.banks.is_empty() {
            return Err(Error::Config("memorizing mode requires --bank".into()).into());
        }
        if resolved.k == 0 {
            return Err(Error::Config("memorizing mode requires k >= 1".into()).into());
        }
        let memory = open_memory(&resolved.banks, resolved.cache_capacity)?;
        reports.push(measure_efficiency(
            &volume,
            &weights,
            Some(&memory),
            &block_cfg,
            args.reps,
            args.warmup,
        )?);
    }
    let rendered = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0]).expect("report serializes")
    } else {
        serde_json::to_string_pretty(&reports).expect("reports serialize")
    };
    println!("{rendered}");
    if let Some(path) = &args.out {
        atomic_write(path, rendered.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long = "bank", value_delimiter = ',')]
    pub banks: Vec<PathBuf>,
    /// k values to sweep.
    #[arg(long = "k-values", value_delimiter = ',', default_value = "1,3,5,7")]
    pub k_values: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub block: BlockOptions,
}

pub fn ablate(args: AblateArgs) -> CmdResult {
    let resolved = resolve(&args.block, &args.banks, args.encoder.as_ref(), None)?;
    resolved.echo();
    let weights = load_encoder_file(resolved.encoder.as_ref())?;
    require_file(&args.input, "input volume")?;
    let volume = Volume::load(&args.input)?;
    if resolved.banks.is_empty() {
        return Err(Error::Config("ablate requires --bank".into()).into());
    }
    let memory = open_memory(&resolved.banks, resolved.cache_capacity)?;
    let rows = run_ablation(
        &args.k_values,
        &volume,
        &weights,
        &memory,
        &resolved.block_config(),
        args.reps,
        args.warmup,
    )?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    if let Some(path) = &args.out {
        atomic_write(path, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct InspectBankArgs {
    pub bank: PathBuf,
}

pub fn inspect_bank(args: InspectBankArgs) -> CmdResult {
    require_file(&args.bank, "bank file")?;
    let bank = BankHandle::open(&args.bank)?;
    let header = bank.header();
    println!("path: {}", args.bank.display());
    println!("version: {}", header.version);
    println!(
        "dtype: {}",
        if header.dtype_code == 0 { "f32-le" } else { "unknown" }
    );
    println!("fingerprint_dim: {}", header.fingerprint_dim);
    println!("layer_ids: {:?}", header.layer_ids);
    println!("n_tokens: {}", header.n_tokens);
    println!("num_heads: {}", header.num_heads);
    println!("d_model: {}", header.d_model);
    println!("entries: {}", header.entry_count);
    println!(
        "payload_bytes_total: {}",
        header.entry_count * header.payload_size()
    );
    let mut per_class: BTreeMap<u32, u64> = BTreeMap::new();
    for row in bank.index() {
        *per_class.entry(row.class_id).or_insert(0) += 1;
    }
    for (class_id, count) in per_class {
        println!("class {class_id}: {count}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MergeBanksArgs {
    /// Input banks, concatenated in argument order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn merge_banks(args: MergeBanksArgs) -> CmdResult {
    for input in &args.inputs {
        require_file(input, "bank file")?;
    }
    memattn_core::bank::merge_banks(&args.inputs, &args.out)?;
    let merged = BankHandle::open(&args.out)?;
    println!(
        "wrote {} entries to {}",
        merged.entry_count(),
        args.out.display()
    );
    Ok(())
}
