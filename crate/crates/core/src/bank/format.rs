//! On-disk memory bank format. All integers little-endian, payload dtype
//! f32 little-endian, layout append-only:
//!
//! ```text
//! header:
//!   magic            [u8; 8]  = "MSAMBNK1"
//!   version          u32      = 1
//!   dtype_code       u32      = 0 (f32 little-endian)
//!   fingerprint_dim  u32
//!   layer_count      u32
//!   layer_ids        u32 * layer_count   (memorized encoder layers)
//!   n_tokens         u32
//!   num_heads        u32
//!   d_model          u32
//!   entry_count      u64
//! index (entry_count rows):
//!   fingerprint      f32 * fingerprint_dim
//!   offset           u64      (absolute payload offset)
//!   length           u64      (payload byte length)
//!   class_id         u32
//!   source_id        [u8; 16]
//!   crc32            u32      (CRC-32/zlib of the payload bytes)
//! payload (entry_count records, in index order):
//!   per layer id, in header order: keys then values,
//!   each n_tokens * d_model f32 values
//! ```
//!
//! Header size is `44 + 4 * layer_count` bytes, an index row is
//! `40 + 4 * fingerprint_dim` bytes, and every payload record is exactly
//! `layer_count * 2 * n_tokens * d_model * 4` bytes, so total file size is
//! fully determined by the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BANK_MAGIC: [u8; 8] = *b"MSAMBNK1";
pub const BANK_VERSION: u32 = 1;
pub const DTYPE_F32_LE: u32 = 0;

/// Bank header: geometry shared by every entry plus the entry count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct BankHeader {
    pub version: u32,
    pub dtype_code: u32,
    pub fingerprint_dim: u32,
    pub layer_ids: Vec<u32>,
    pub n_tokens: u32,
    pub num_heads: u32,
    pub d_model: u32,
    pub entry_count: u64,
}

impl BankHeader {
    pub fn new_geometry(
        fingerprint_dim: u32,
        layer_ids: Vec<u32>,
        n_tokens: u32,
        num_heads: u32,
        d_model: u32,
    ) -> Self {
        BankHeader {
            version: BANK_VERSION,
            dtype_code: DTYPE_F32_LE,
            fingerprint_dim,
            layer_ids,
            n_tokens,
            num_heads,
            d_model,
            entry_count: 0,
        }
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.version != BANK_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported version {}", self.version),
            });
        }
        if self.dtype_code != DTYPE_F32_LE {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported dtype code {}", self.dtype_code),
            });
        }
        if self.fingerprint_dim == 0
            || self.layer_ids.is_empty()
            || self.n_tokens == 0
            || self.num_heads == 0
            || self.d_model == 0
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "geometry fields must all be positive".into(),
            });
        }
        Ok(())
    }

    pub fn header_size(&self) -> u64 {
        44 + 4 * self.layer_ids.len() as u64
    }

    pub fn index_row_size(&self) -> u64 {
        40 + 4 * self.fingerprint_dim as u64
    }

    /// Payload byte length of one entry; identical for every entry.
    pub fn payload_size(&self) -> u64 {
        self.layer_ids.len() as u64 * 2 * self.n_tokens as u64 * self.d_model as u64 * 4
    }

    pub fn same_geometry(&self, other: &BankHeader) -> bool {
        self.dtype_code == other.dtype_code
            && self.fingerprint_dim == other.fingerprint_dim
            && self.layer_ids == other.layer_ids
            && self.n_tokens == other.n_tokens
            && self.num_heads == other.num_heads
            && self.d_model == other.d_model
    }

    pub fn geometry_string(&self) -> String {
        format!(
            "fingerprint_dim={} layers={:?} n_tokens={} num_heads={} d_model={}",
            self.fingerprint_dim, self.layer_ids, self.n_tokens, self.num_heads, self.d_model
        )
    }
}

/// Post-projection key/value tensors of one memorized layer.
#[derive(Debug, Clone)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

/// One stored memory tuple: fingerprint standing in for the image, the
/// per-layer (key, value) tensors, and provenance metadata.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub fingerprint: Vec<f32>,
    /// Aligned with the bank header's `layer_ids`.
    pub layers: Vec<LayerKv>,
    pub class_id: u32,
    pub source_id: [u8; 16],
}

impl MemoryEntry {
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for t in [&layer.keys, &layer.values] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn payload_crc32(&self) -> u32 {
        crc32fast::hash(&self.payload_bytes())
    }

    fn validate_against(&self, header: &BankHeader, path: &Path) -> Result<()> {
        let shape_ok = self.fingerprint.len() == header.fingerprint_dim as usize
            && self.layers.len() == header.layer_ids.len()
            && self.layers.iter().all(|l| {
                l.keys.shape() == [header.n_tokens as usize, header.d_model as usize]
                    && l.values.shape() == l.keys.shape()
            });
        if !shape_ok {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                message: format!(
                    "entry geometry does not match header ({})",
                    header.geometry_string()
                ),
            });
        }
        Ok(())
    }
}

/// One in-memory index row, exactly mirroring the on-disk layout.
#[derive(Debug, Clone)]
pub struct IndexRow {
    pub fingerprint: Vec<f32>,
    pub offset: u64,
    pub length: u64,
    pub class_id: u32,
    pub source_id: [u8; 16],
    pub crc32: u32,
}

struct Le<W: Write>(W);

impl<W: Write> Le<W> {
    fn bytes(&mut self, b: &[u8], path: &Path) -> Result<()> {
        self.0.write_all(b).map_err(|e| Error::io(path, e))
    }
    fn u32(&mut self, v: u32, path: &Path) -> Result<()> {
        self.bytes(&v.to_le_bytes(), path)
    }
    fn u64(&mut self, v: u64, path: &Path) -> Result<()> {
        self.bytes(&v.to_le_bytes(), path)
    }
    fn f32s(&mut self, vs: &[f32], path: &Path) -> Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes(), path)?;
        }
        Ok(())
    }
}

/// Writes a complete bank in one pass: header, index table, payload region.
/// The file is written to a temporary sibling and renamed into place so a
/// failed build never leaves a partial bank behind.
pub fn write_bank<I>(entries: I, geometry: &BankHeader, path: &Path) -> Result<u64>
where
    I: IntoIterator<Item = MemoryEntry>,
{
    geometry.validate(path)?;
    let entries: Vec<MemoryEntry> = entries.into_iter().collect();
    for entry in &entries {
        entry.validate_against(geometry, path)?;
    }
    let mut header = geometry.clone();
    header.entry_count = entries.len() as u64;

    let payloads: Vec<Vec<u8>> = entries.iter().map(MemoryEntry::payload_bytes).collect();
    let payload_base = header.header_size() + header.entry_count * header.index_row_size();

    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = tempfile::NamedTempFile::new_in(parent.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    {
        let mut w = Le(BufWriter::new(tmp.as_file()));
        w.bytes(&BANK_MAGIC, path)?;
        w.u32(header.version, path)?;
        w.u32(header.dtype_code, path)?;
        w.u32(header.fingerprint_dim, path)?;
        w.u32(header.layer_ids.len() as u32, path)?;
        for id in &header.layer_ids {
            w.u32(*id, path)?;
        }
        w.u32(header.n_tokens, path)?;
        w.u32(header.num_heads, path)?;
        w.u32(header.d_model, path)?;
        w.u64(header.entry_count, path)?;

        let mut offset = payload_base;
        for (entry, payload) in entries.iter().zip(&payloads) {
            w.f32s(&entry.fingerprint, path)?;
            w.u64(offset, path)?;
            w.u64(payload.len() as u64, path)?;
            w.u32(entry.class_id, path)?;
            w.bytes(&entry.source_id, path)?;
            w.u32(crc32fast::hash(payload), path)?;
            offset += payload.len() as u64;
        }
        for payload in &payloads {
            w.bytes(payload, path)?;
        }
        w.0.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(header.entry_count)
}

struct LeReader<R: Read> {
    inner: R,
    bytes_read: u64,
}

impl<R: Read> LeReader<R> {
    fn new(inner: R) -> Self {
        LeReader {
            inner,
            bytes_read: 0,
        }
    }
    fn exact(&mut self, buf: &mut [u8]) -> std::io::Result<()> {
        self.inner.read_exact(buf)?;
        self.bytes_read += buf.len() as u64;
        Ok(())
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f32s(&mut self, n: usize) -> std::io::Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses the header and full index table, returning the open file and the
/// number of bytes consumed (header + index only; no payload bytes).
pub(crate) fn read_header_and_index(path: &Path) -> Result<(BankHeader, Vec<IndexRow>, File, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = LeReader::new(BufReader::new(&file));

    let mut magic = [0u8; 8];
    r.exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != BANK_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic {magic:?}"),
        });
    }
    let header = (|| -> std::io::Result<BankHeader> {
        let version = r.u32()?;
        let dtype_code = r.u32()?;
        let fingerprint_dim = r.u32()?;
        let layer_count = r.u32()?;
        let mut layer_ids = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            layer_ids.push(r.u32()?);
        }
        Ok(BankHeader {
            version,
            dtype_code,
            fingerprint_dim,
            layer_ids,
            n_tokens: r.u32()?,
            num_heads: r.u32()?,
            d_model: r.u32()?,
            entry_count: r.u64()?,
        })
    })()
    .map_err(|e| Error::io(path, e))?;
    header.validate(path)?;

    let mut index = Vec::with_capacity(header.entry_count as usize);
    for row_id in 0..header.entry_count {
        let row = (|| -> std::io::Result<IndexRow> {
            let fingerprint = r.f32s(header.fingerprint_dim as usize)?;
            let offset = r.u64()?;
            let length = r.u64()?;
            let class_id = r.u32()?;
            let mut source_id = [0u8; 16];
            r.exact(&mut source_id)?;
            let crc32 = r.u32()?;
            Ok(IndexRow {
                fingerprint,
                offset,
                length,
                class_id,
                source_id,
                crc32,
            })
        })()
        .map_err(|_| Error::Corruption {
            entry_id: row_id,
            message: format!("truncated index in {}", path.display()),
        })?;
        if row.length != header.payload_size() {
            return Err(Error::Corruption {
                entry_id: row_id,
                message: format!(
                    "index row declares payload length {} but geometry requires {}",
                    row.length,
                    header.payload_size()
                ),
            });
        }
        index.push(row);
    }
    let consumed = r.bytes_read;
    debug_assert_eq!(
        consumed,
        header.header_size() + header.entry_count * header.index_row_size()
    );
    Ok((header, index, file, consumed))
}

/// Decodes one payload record into per-layer (keys, values) tensors.
pub(crate) fn decode_payload(header: &BankHeader, bytes: &[u8]) -> Result<Vec<LayerKv>> {
    let n = header.n_tokens as usize;
    let d = header.d_model as usize;
    let tensor_bytes = n * d * 4;
    let mut layers = Vec::with_capacity(header.layer_ids.len());
    let mut cursor = 0usize;
    let take = |cursor: &mut usize| -> Result<Tensor> {
        let chunk = &bytes[*cursor..*cursor + tensor_bytes];
        *cursor += tensor_bytes;
        let data: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(vec![n, d], data)
    };
    for _ in 0..header.layer_ids.len() {
        let keys = take(&mut cursor)?;
        let values = take(&mut cursor)?;
        layers.push(LayerKv { keys, values });
    }
    Ok(layers)
}

/// Concatenates banks with identical geometry into one. Entries keep their
/// class ids and payload bytes verbatim; output order is input order.
pub fn merge_banks(paths: &[PathBuf], out_path: &Path) -> Result<()> {
    if paths.is_empty() {
        return Err(Error::Config("merge_banks needs at least one input".into()));
    }
    let mut reference: Option<BankHeader> = None;
    let mut rows: Vec<(IndexRow, Vec<u8>)> = Vec::new();
    for path in paths {
        let (header, index, file, _) = read_header_and_index(path)?;
        match &reference {
            None => reference = Some(header.clone()),
            Some(r) if r.same_geometry(&header) => {}
            Some(r) => {
                return Err(Error::Schema {
                    path: path.clone(),
                    message: format!(
                        "geometry mismatch: expected {}, found {}",
                        r.geometry_string(),
                        header.geometry_string()
                    ),
                });
            }
        }
        for row in index {
            let payload =
                read_payload_at(&file, row.offset, row.length).map_err(|e| Error::io(path, e))?;
            rows.push((row, payload));
        }
    }
    let mut header = reference.expect("at least one input");
    header.entry_count = rows.len() as u64;
    let payload_base = header.header_size() + header.entry_count * header.index_row_size();

    let parent = out_path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = tempfile::NamedTempFile::new_in(parent.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(out_path, e))?;
    {
        let mut w = Le(BufWriter::new(tmp.as_file()));
        w.bytes(&BANK_MAGIC, out_path)?;
        w.u32(header.version, out_path)?;
        w.u32(header.dtype_code, out_path)?;
        w.u32(header.fingerprint_dim, out_path)?;
        w.u32(header.layer_ids.len() as u32, out_path)?;
        for id in &header.layer_ids {
            w.u32(*id, out_path)?;
        }
        w.u32(header.n_tokens, out_path)?;
        w.u32(header.num_heads, out_path)?;
        w.u32(header.d_model, out_path)?;
        w.u64(header.entry_count, out_path)?;
        let mut offset = payload_base;
        for (row, payload) in &rows {
            w.f32s(&row.fingerprint, out_path)?;
            w.u64(offset, out_path)?;
            w.u64(payload.len() as u64, out_path)?;
            w.u32(row.class_id, out_path)?;
            w.bytes(&row.source_id, out_path)?;
            w.u32(row.crc32, out_path)?;
            offset += payload.len() as u64;
        }
        for (_, payload) in &rows {
            w.bytes(payload, out_path)?;
        }
        w.0.flush().map_err(|e| Error::io(out_path, e))?;
    }
    tmp.persist(out_path)
        .map_err(|e| Error::io(out_path, e.error))?;
    Ok(())
}

pub(crate) fn read_payload_at(file: &File, offset: u64, length: u64) -> std::io::Result<Vec<u8>> {
    use std::os::unix::fs::FileExt;
    let mut buf = vec![0u8; length as usize];
    file.read_exact_at(&mut buf, offset)?;
    Ok(buf)
}
