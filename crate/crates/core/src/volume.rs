//! Volumetric inputs: a dense f32 voxel grid with intensities in `[0, 1]`.
//!
//! Two on-disk forms are supported:
//! * the self-describing `.vol` container: magic `"VOL1"`, then
//!   `u32 dims[3]` (D, H, W, little-endian), then `D*H*W` f32 voxels;
//! * a raw little-endian f32 file with a JSON sidecar at `<path>.json`
//!   carrying `{"dims": [D, H, W]}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::prng::Prng;

pub const VOL_MAGIC: [u8; 4] = *b"VOL1";

#[derive(Debug, Clone)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        let expected = dims[0] * dims[1] * dims[2];
        if expected == 0 {
            return Err(Error::Parameter {
                name: "dims",
                message: format!("dimensions must be positive, got {dims:?}"),
            });
        }
        if voxels.len() != expected {
            return Err(Error::Parameter {
                name: "voxels",
                message: format!("expected {expected} voxels for dims {dims:?}, got {}", voxels.len()),
            });
        }
        if voxels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter {
                name: "voxels",
                message: "intensities must lie in [0, 1]".into(),
            });
        }
        Ok(Volume { dims, voxels })
    }

    /// Uniform-noise volume, deterministic in the seed.
    pub fn random(dims: [usize; 3], seed: u64) -> Result<Self> {
        let mut prng = Prng::new(seed);
        let n = dims[0] * dims[1] * dims[2];
        let voxels = (0..n).map(|_| prng.uniform_f32()).collect();
        Volume::new(dims, voxels)
    }

    pub fn voxel(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.dims;
        self.voxels[(z * h + y) * w + x]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let tmp = tempfile::NamedTempFile::new_in(parent.unwrap_or(Path::new(".")))
            .map_err(|e| Error::io(path, e))?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file());
            let io = |e| Error::io(path, e);
            w.write_all(&VOL_MAGIC).map_err(io)?;
            for d in self.dims {
                w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            for v in &self.voxels {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Loads either a `.vol` container or a raw f32 file with JSON sidecar,
    /// chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "vol") {
            Self::load_container(path)
        } else {
            Self::load_raw_with_sidecar(path)
        }
    }

    fn load_container(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(io)?;
        if magic != VOL_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("bad volume magic {magic:?}"),
            });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            file.read_exact(&mut b).map_err(io)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let mut bytes = vec![0u8; n * 4];
        file.read_exact(&mut bytes).map_err(io)?;
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(dims, voxels)
    }

    fn load_raw_with_sidecar(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            dims: [usize; 3],
        }
        let mut sidecar_path = path.as_os_str().to_owned();
        sidecar_path.push(".json");
        let sidecar_path = Path::new(&sidecar_path);
        let text =
            std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: sidecar_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("raw volume length {} is not a multiple of 4", bytes.len()),
            });
        }
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(sidecar.dims, voxels)
    }
}
