//! Read-only bank handle. The index is loaded eagerly on open; payloads are
//! read lazily, one whole entry per cache miss, and held in a bounded LRU
//! cache. Byte counters are exact: after open they show header + index
//! bytes, and each distinct fetched entry adds exactly one payload record.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tensor::{l2_distance, Tensor};

use super::format::{decode_payload, read_header_and_index, read_payload_at, BankHeader, IndexRow, LayerKv};

pub const DEFAULT_CACHE_CAPACITY: usize = 64;

/// One kNN result, ascending by distance with entry-id tie-break.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub entry_id: u64,
    pub distance: f32,
}

/// Snapshot of a handle's I/O and cache accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct IoStats {
    pub bytes_read: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub evictions: u64,
    pub resident_entries: u64,
    pub resident_bytes: u64,
    pub peak_resident_bytes: u64,
}

#[derive(Debug)]
struct CacheState {
    file: File,
    capacity: usize,
    /// Recency order, least recently used first.
    order: Vec<u64>,
    resident: HashMap<u64, Arc<Vec<LayerKv>>>,
    eviction_log: Vec<u64>,
    bytes_read: u64,
    hits: u64,
    misses: u64,
    resident_bytes: u64,
    peak_resident_bytes: u64,
}

/// Open bank: eager index, lazy payloads, internally synchronized cache.
/// Concurrent readers are safe; `knn_search` touches only the immutable
/// index and takes no lock.
#[derive(Debug)]
pub struct BankHandle {
    path: PathBuf,
    header: BankHeader,
    index: Vec<IndexRow>,
    state: Mutex<CacheState>,
}

impl BankHandle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_capacity(path, DEFAULT_CACHE_CAPACITY)
    }

    pub fn open_with_capacity(path: impl AsRef<Path>, capacity: usize) -> Result<Self> {
        let path = path.as_ref();
        if capacity == 0 {
            return Err(Error::Parameter {
                name: "cache_capacity",
                message: "must be at least 1".into(),
            });
        }
        let (header, index, file, consumed) = read_header_and_index(path)?;
        for (row_id, row) in index.iter().enumerate() {
            if row.fingerprint.iter().any(|v| !v.is_finite()) {
                return Err(Error::Corruption {
                    entry_id: row_id as u64,
                    message: "non-finite fingerprint in index".into(),
                });
            }
        }
        Ok(BankHandle {
            path: path.to_path_buf(),
            header,
            index,
            state: Mutex::new(CacheState {
                file,
                capacity,
                order: Vec::new(),
                resident: HashMap::new(),
                eviction_log: Vec::new(),
                bytes_read: consumed,
                hits: 0,
                misses: 0,
                resident_bytes: 0,
                peak_resident_bytes: 0,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &BankHeader {
        &self.header
    }

    pub fn index(&self) -> &[IndexRow] {
        &self.index
    }

    pub fn entry_count(&self) -> u64 {
        self.header.entry_count
    }

    /// Exact k-nearest-neighbor scan over the index fingerprints.
    /// Returns `min(k, entry_count)` hits ordered by (distance, entry_id);
    /// touches no payload bytes.
    pub fn knn_search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        knn_over_index(
            self.index.iter().map(|row| row.fingerprint.as_slice()),
            self.header.fingerprint_dim as usize,
            query,
            k,
        )
    }

    /// Decoded (keys, values) for one entry and layer. Served from cache on
    /// a hit; a miss reads the entry's whole payload record once, checks its
    /// CRC, and inserts it with LRU eviction.
    pub fn fetch_payload(&self, entry_id: u64, layer_id: u32) -> Result<(Tensor, Tensor)> {
        let layer_pos = self
            .header
            .layer_ids
            .iter()
            .position(|&id| id == layer_id)
            .ok_or_else(|| Error::Parameter {
                name: "layer_id",
                message: format!(
                    "layer {layer_id} is not memorized in this bank (layers {:?})",
                    self.header.layer_ids
                ),
            })?;
        let row = self
            .index
            .get(entry_id as usize)
            .ok_or_else(|| Error::Parameter {
                name: "entry_id",
                message: format!(
                    "entry {entry_id} out of range (bank holds {})",
                    self.header.entry_count
                ),
            })?;

        let mut state = self.state.lock().expect("bank cache lock");
        let decoded = if let Some(found) = state.resident.get(&entry_id) {
            let found = Arc::clone(found);
            state.hits += 1;
            let pos = state
                .order
                .iter()
                .position(|&id| id == entry_id)
                .expect("resident entry present in recency order");
            state.order.remove(pos);
            state.order.push(entry_id);
            found
        } else {
            let bytes = read_payload_at(&state.file, row.offset, row.length).map_err(|e| {
                Error::Retrieval {
                    entry_id,
                    message: format!("payload read failed: {e}"),
                }
            })?;
            state.bytes_read += bytes.len() as u64;
            let crc = crc32fast::hash(&bytes);
            if crc != row.crc32 {
                return Err(Error::Corruption {
                    entry_id,
                    message: format!(
                        "payload CRC mismatch: stored {:08x}, computed {crc:08x}",
                        row.crc32
                    ),
                });
            }
            let layers = Arc::new(decode_payload(&self.header, &bytes)?);
            state.misses += 1;
            state.resident.insert(entry_id, Arc::clone(&layers));
            state.order.push(entry_id);
            state.resident_bytes += row.length;
            while state.order.len() > state.capacity {
                let victim = state.order.remove(0);
                state.resident.remove(&victim);
                state.resident_bytes -= self.header.payload_size();
                state.eviction_log.push(victim);
            }
            state.peak_resident_bytes = state.peak_resident_bytes.max(state.resident_bytes);
            layers
        };
        let layer = &decoded[layer_pos];
        Ok((layer.keys.clone(), layer.values.clone()))
    }

    pub fn io_stats(&self) -> IoStats {
        let state = self.state.lock().expect("bank cache lock");
        IoStats {
            bytes_read: state.bytes_read,
            cache_hits: state.hits,
            cache_misses: state.misses,
            evictions: state.eviction_log.len() as u64,
            resident_entries: state.resident.len() as u64,
            resident_bytes: state.resident_bytes,
            peak_resident_bytes: state.peak_resident_bytes,
        }
    }

    /// Currently resident entry ids, least recently used first.
    pub fn resident_entry_ids(&self) -> Vec<u64> {
        self.state.lock().expect("bank cache lock").order.clone()
    }

    /// Entry ids evicted so far, in eviction order.
    pub fn eviction_log(&self) -> Vec<u64> {
        self.state
            .lock()
            .expect("bank cache lock")
            .eviction_log
            .clone()
    }
}

/// Linear-scan kNN shared by single banks and bank sets.
pub(crate) fn knn_over_index<'a, I>(
    fingerprints: I,
    fingerprint_dim: usize,
    query: &[f32],
    k: usize,
) -> Result<Vec<Neighbor>>
where
    I: Iterator<Item = &'a [f32]>,
{
    if query.len() != fingerprint_dim {
        return Err(Error::DimensionMismatch {
            op: "knn_search",
            left: format!("query [{}]", query.len()),
            right: format!("fingerprint [{fingerprint_dim}]"),
        });
    }
    let mut hits: Vec<Neighbor> = fingerprints
        .enumerate()
        .map(|(id, fp)| {
            Ok(Neighbor {
                entry_id: id as u64,
                distance: l2_distance(query, fp)?,
            })
        })
        .collect::<Result<_>>()?;
    hits.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.entry_id.cmp(&b.entry_id))
    });
    hits.truncate(k);
    Ok(hits)
}
