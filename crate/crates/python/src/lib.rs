//! Python bindings for the retrieval-augmented attention engine: encoder
//! configuration and forward passes, memory banks (open, search, fetch,
//! stats), bank building from manifests, fusion weights, and FLOP counts.
//!
//! Build the extension with `cargo build -p memattn-python --release`; the
//! resulting `libmemattn.so` imports as the `memattn` module once renamed to
//! `memattn.so` (see `python/smoke_test.py`).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use memattn_core::bank::{BankHandle, MemorySource};
use memattn_core::bench;
use memattn_core::builder;
use memattn_core::encoder;
use memattn_core::error::Error;
use memattn_core::fusion;
use memattn_core::volume;

fn to_pyerr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Corruption { .. } | Error::Retrieval { .. } => {
            PyIOError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense voxel volume with intensities in [0, 1].
#[pyclass(name = "Volume", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: (usize, usize, usize), voxels: Vec<f32>) -> PyResult<Self> {
        let inner =
            volume::Volume::new([dims.0, dims.1, dims.2], voxels).map_err(to_pyerr)?;
        Ok(PyVolume { inner })
    }

    /// Uniform-noise volume, deterministic in the seed.
    #[staticmethod]
    fn random(dims: (usize, usize, usize), seed: u64) -> PyResult<Self> {
        let inner = volume::Volume::random([dims.0, dims.1, dims.2], seed).map_err(to_pyerr)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = volume::Volume::load(&path).map_err(to_pyerr)?;
        Ok(PyVolume { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_pyerr)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.dims;
        (d, h, w)
    }

    #[getter]
    fn voxels(&self) -> Vec<f32> {
        self.inner.voxels.clone()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.inner.dims)
    }
}

/// Encoder geometry and seed.
#[pyclass(name = "EncoderConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoderConfig {
    inner: encoder::EncoderConfig,
}

#[pymethods]
impl PyEncoderConfig {
    #[new]
    #[pyo3(signature = (
        volume_dims = (32, 32, 32),
        patch_size = 8,
        d_model = 64,
        d_ff = 256,
        num_heads = 4,
        num_layers = 4,
        memorizing_layers = vec![2],
        seed = 42,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        volume_dims: (usize, usize, usize),
        patch_size: usize,
        d_model: usize,
        d_ff: usize,
        num_heads: usize,
        num_layers: usize,
        memorizing_layers: Vec<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = encoder::EncoderConfig {
            volume_dims: [volume_dims.0, volume_dims.1, volume_dims.2],
            patch_size,
            d_model,
            d_ff,
            num_heads,
            num_layers,
            memorizing_layers,
            seed,
        };
        inner.validate().map_err(to_pyerr)?;
        Ok(PyEncoderConfig { inner })
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn memorizing_layers(&self) -> Vec<usize> {
        self.inner.memorizing_layers.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "EncoderConfig(volume_dims={:?}, patch_size={}, d_model={}, d_ff={}, num_heads={}, num_layers={}, memorizing_layers={:?}, seed={})",
            self.inner.volume_dims,
            self.inner.patch_size,
            self.inner.d_model,
            self.inner.d_ff,
            self.inner.num_heads,
            self.inner.num_layers,
            self.inner.memorizing_layers,
            self.inner.seed,
        )
    }
}

/// Memorizing-block hyperparameters.
#[pyclass(name = "BlockConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyBlockConfig {
    inner: fusion::BlockConfig,
}

#[pymethods]
impl PyBlockConfig {
    #[new]
    #[pyo3(signature = (
        r_local = 0.3,
        k = 3,
        fusion = "normalized-inverse-distance",
        epsilon = 1e-6,
    ))]
    fn new(r_local: f64, k: usize, fusion: &str, epsilon: f64) -> PyResult<Self> {
        let inner = fusion::BlockConfig {
            r_local,
            k,
            fusion_mode: fusion.parse().map_err(to_pyerr)?,
            epsilon,
        };
        inner.validate().map_err(to_pyerr)?;
        Ok(PyBlockConfig { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn r_local(&self) -> f64 {
        self.inner.r_local
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockConfig(r_local={}, k={}, fusion=\"{}\", epsilon={})",
            self.inner.r_local, self.inner.k, self.inner.fusion_mode, self.inner.epsilon
        )
    }
}

/// Open read-only memory bank.
#[pyclass(name = "Bank")]
struct PyBank {
    inner: BankHandle,
}

#[pymethods]
impl PyBank {
    #[staticmethod]
    #[pyo3(signature = (path, cache_capacity = 64))]
    fn open(path: PathBuf, cache_capacity: usize) -> PyResult<Self> {
        let inner =
            BankHandle::open_with_capacity(&path, cache_capacity).map_err(to_pyerr)?;
        Ok(PyBank { inner })
    }

    #[getter]
    fn entry_count(&self) -> u64 {
        self.inner.entry_count()
    }

    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let h = self.inner.header();
        let d = PyDict::new(py);
        d.set_item("version", h.version)?;
        d.set_item("dtype_code", h.dtype_code)?;
        d.set_item("fingerprint_dim", h.fingerprint_dim)?;
        d.set_item("layer_ids", h.layer_ids.clone())?;
        d.set_item("n_tokens", h.n_tokens)?;
        d.set_item("num_heads", h.num_heads)?;
        d.set_item("d_model", h.d_model)?;
        d.set_item("entry_count", h.entry_count)?;
        Ok(d)
    }

    /// Exact kNN over fingerprints: list of (entry_id, distance), ascending.
    fn knn_search(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(u64, f32)>> {
        let hits = self.inner.knn_search(&query, k).map_err(to_pyerr)?;
        Ok(hits.into_iter().map(|h| (h.entry_id, h.distance)).collect())
    }

    /// Stored (keys, values) for one entry and layer, each as
    /// ((rows, cols), flat_list).
    #[allow(clippy::type_complexity)]
    fn fetch(
        &self,
        entry_id: u64,
        layer_id: u32,
    ) -> PyResult<(((usize, usize), Vec<f32>), ((usize, usize), Vec<f32>))> {
        let (keys, values) = self.inner.fetch_payload(entry_id, layer_id).map_err(to_pyerr)?;
        let pack = |t: memattn_core::Tensor| ((t.rows(), t.cols()), t.into_data());
        Ok((pack(keys), pack(values)))
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.io_stats();
        let d = PyDict::new(py);
        d.set_item("bytes_read", s.bytes_read)?;
        d.set_item("cache_hits", s.cache_hits)?;
        d.set_item("cache_misses", s.cache_misses)?;
        d.set_item("evictions", s.evictions)?;
        d.set_item("resident_entries", s.resident_entries)?;
        d.set_item("resident_bytes", s.resident_bytes)?;
        d.set_item("peak_resident_bytes", s.peak_resident_bytes)?;
        Ok(d)
    }

    /// Resident entry ids, least recently used first.
    fn resident_entries(&self) -> Vec<u64> {
        self.inner.resident_entry_ids()
    }
}

/// One encode result: features plus the retrieval fingerprint.
#[pyclass(name = "EncodeResult")]
struct PyEncodeResult {
    #[pyo3(get)]
    shape: (usize, usize),
    #[pyo3(get)]
    features: Vec<f32>,
    #[pyo3(get)]
    fingerprint: Vec<f32>,
    #[pyo3(get)]
    fingerprint_degenerate: bool,
    #[pyo3(get)]
    checksum: String,
}

/// Frozen encoder weights.
#[pyclass(name = "Encoder")]
struct PyEncoder {
    inner: encoder::EncoderWeights,
}

#[pymethods]
impl PyEncoder {
    /// Seeded deterministic initialization from a config.
    #[new]
    fn new(config: &PyEncoderConfig) -> PyResult<Self> {
        let inner = encoder::EncoderWeights::init(&config.inner).map_err(to_pyerr)?;
        Ok(PyEncoder { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = encoder::EncoderWeights::load(&path).map_err(to_pyerr)?;
        Ok(PyEncoder { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_pyerr)
    }

    #[getter]
    fn config(&self) -> PyEncoderConfig {
        PyEncoderConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn parameter_count(&self) -> u64 {
        self.inner.parameter_count()
    }

    /// Forward pass; pass a Bank and a BlockConfig with k > 0 to retrieve.
    #[pyo3(signature = (volume, bank = None, block = None))]
    fn encode(
        &self,
        volume: &PyVolume,
        bank: Option<PyRef<'_, PyBank>>,
        block: Option<PyRef<'_, PyBlockConfig>>,
    ) -> PyResult<PyEncodeResult> {
        let block_cfg = block
            .map(|b| b.inner.clone())
            .unwrap_or_default();
        let memory = bank.as_ref().map(|b| &b.inner as &dyn MemorySource);
        let out =
            encoder::encode(&volume.inner, &self.inner, memory, &block_cfg).map_err(to_pyerr)?;
        Ok(PyEncodeResult {
            shape: (out.features.rows(), out.features.cols()),
            checksum: format!("{:08x}", bench::feature_checksum(&out.features)),
            features: out.features.into_data(),
            fingerprint: out.fingerprint.values,
            fingerprint_degenerate: out.fingerprint.is_degenerate,
        })
    }

    /// Retrieval fingerprint of a volume (L2-normalized token mean).
    fn fingerprint(&self, volume: &PyVolume) -> PyResult<Vec<f32>> {
        let tokens = encoder::patch_embed(&volume.inner, &self.inner).map_err(to_pyerr)?;
        Ok(encoder::fingerprint(&tokens).values)
    }
}

/// Builds one class bank from a manifest JSON; returns the build report.
#[pyfunction]
fn build_bank<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    encoder_obj: &PyEncoder,
    out_path: PathBuf,
) -> PyResult<Bound<'py, PyDict>> {
    let manifest = builder::ClassDatasetManifest::load(&manifest).map_err(to_pyerr)?;
    let report = builder::build_bank(&manifest, &encoder_obj.inner, &out_path).map_err(to_pyerr)?;
    let d = PyDict::new(py);
    d.set_item("class_id", report.class_id)?;
    d.set_item("label", report.label)?;
    d.set_item("entries_written", report.entries_written)?;
    let skipped: Vec<(String, String)> = report
        .skipped
        .iter()
        .map(|s| (s.path.display().to_string(), s.reason.clone()))
        .collect();
    d.set_item("skipped", skipped)?;
    d.set_item("bank_path", report.bank_path.display().to_string())?;
    d.set_item("wall_time_secs", report.wall_time_secs)?;
    Ok(d)
}

/// Concatenates banks with identical geometry.
#[pyfunction]
fn merge_banks(paths: Vec<PathBuf>, out_path: PathBuf) -> PyResult<()> {
    memattn_core::bank::merge_banks(&paths, &out_path).map_err(to_pyerr)
}

/// Combination ratios for a distance vector: returns (r_local, [r_i...]).
#[pyfunction]
#[pyo3(signature = (distances, r_local = 0.3, fusion = "normalized-inverse-distance", epsilon = 1e-6))]
fn fusion_weights(
    distances: Vec<f32>,
    r_local: f64,
    fusion: &str,
    epsilon: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = fusion::BlockConfig {
        r_local,
        k: distances.len(),
        fusion_mode: fusion.parse().map_err(to_pyerr)?,
        epsilon,
    };
    let w = fusion::compute_fusion_weights(&distances, &cfg).map_err(to_pyerr)?;
    Ok((w.r_local, w.r_mem))
}

/// Analytic FLOP counts: (parametric, total including memory attention).
#[pyfunction]
#[pyo3(signature = (config, k = 3, n_mem_tokens = None))]
fn count_flops(
    config: &PyEncoderConfig,
    k: usize,
    n_mem_tokens: Option<u64>,
) -> PyResult<(u64, u64)> {
    let block_cfg = fusion::BlockConfig {
        k,
        ..fusion::BlockConfig::default()
    };
    let n_mem = n_mem_tokens.unwrap_or(config.inner.n_tokens() as u64);
    let counts = bench::count_flops(&config.inner, &block_cfg, n_mem);
    Ok((counts.parametric, counts.total))
}

#[pymodule]
fn memattn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyEncoderConfig>()?;
    m.add_class::<PyBlockConfig>()?;
    m.add_class::<PyBank>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyEncodeResult>()?;
    m.add_function(wrap_pyfunction!(build_bank, m)?)?;
    m.add_function(wrap_pyfunction!(merge_banks, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_weights, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

