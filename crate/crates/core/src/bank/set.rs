//! A read-only view over several banks with identical geometry, searched as
//! one merged index. Entry ids are globally numbered in input order, which
//! makes results identical to searching the file produced by `merge_banks`
//! on the same inputs.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::format::BankHeader;
use super::handle::{knn_over_index, BankHandle, IoStats, Neighbor, DEFAULT_CACHE_CAPACITY};
use super::MemorySource;

pub struct BankSet {
    banks: Vec<BankHandle>,
    /// Global id of each bank's first entry.
    offsets: Vec<u64>,
    merged_header: BankHeader,
}

impl BankSet {
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        Self::open_with_capacity(paths, DEFAULT_CACHE_CAPACITY)
    }

    pub fn open_with_capacity(paths: &[PathBuf], capacity: usize) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Config("bank set needs at least one bank".into()));
        }
        let mut banks = Vec::with_capacity(paths.len());
        let mut offsets = Vec::with_capacity(paths.len());
        let mut total = 0u64;
        for path in paths {
            let bank = BankHandle::open_with_capacity(path, capacity)?;
            offsets.push(total);
            total += bank.entry_count();
            banks.push(bank);
        }
        let first_header = banks[0].header().clone();
        for bank in &banks[1..] {
            if !bank.header().same_geometry(&first_header) {
                return Err(Error::Schema {
                    path: bank.path().to_path_buf(),
                    message: format!(
                        "geometry mismatch: expected {}, found {}",
                        first_header.geometry_string(),
                        bank.header().geometry_string()
                    ),
                });
            }
        }
        let mut merged_header = first_header;
        merged_header.entry_count = total;
        Ok(BankSet {
            banks,
            offsets,
            merged_header,
        })
    }

    pub fn banks(&self) -> &[BankHandle] {
        &self.banks
    }

    fn locate(&self, global_id: u64) -> Result<(usize, u64)> {
        let idx = match self.offsets.binary_search(&global_id) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        let local = global_id - self.offsets[idx];
        if local >= self.banks[idx].entry_count() {
            return Err(Error::Parameter {
                name: "entry_id",
                message: format!(
                    "entry {global_id} out of range (set holds {})",
                    self.merged_header.entry_count
                ),
            });
        }
        Ok((idx, local))
    }
}

impl MemorySource for BankSet {
    fn header(&self) -> &BankHeader {
        &self.merged_header
    }

    fn entry_count(&self) -> u64 {
        self.merged_header.entry_count
    }

    fn knn_search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        knn_over_index(
            self.banks
                .iter()
                .flat_map(|b| b.index().iter().map(|row| row.fingerprint.as_slice())),
            self.merged_header.fingerprint_dim as usize,
            query,
            k,
        )
    }

    fn fetch_layer(&self, entry_id: u64, layer_id: u32) -> Result<(Tensor, Tensor)> {
        let (idx, local) = self.locate(entry_id)?;
        self.banks[idx].fetch_payload(local, layer_id)
    }

    fn io_stats(&self) -> IoStats {
        let mut total = IoStats::default();
        for bank in &self.banks {
            let s = bank.io_stats();
            total.bytes_read += s.bytes_read;
            total.cache_hits += s.cache_hits;
            total.cache_misses += s.cache_misses;
            total.evictions += s.evictions;
            total.resident_entries += s.resident_entries;
            total.resident_bytes += s.resident_bytes;
            total.peak_resident_bytes += s.peak_resident_bytes;
        }
        total
    }
}
