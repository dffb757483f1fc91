//! Disk-backed memory banks: bit-exact binary format, lazy per-entry payload
//! loading behind an LRU cache, and exact kNN search over fingerprints.

mod format;
mod handle;
mod set;

pub use format::{
    merge_banks, write_bank, BankHeader, IndexRow, LayerKv, MemoryEntry, BANK_MAGIC, BANK_VERSION,
    DTYPE_F32_LE,
};
pub use handle::{BankHandle, IoStats, Neighbor, DEFAULT_CACHE_CAPACITY};
pub use set::BankSet;

use crate::error::Result;
use crate::tensor::Tensor;

/// Anything the memorizing blocks can retrieve from: a single bank or a
/// merged view over several.
pub trait MemorySource: Sync {
    fn header(&self) -> &BankHeader;
    fn entry_count(&self) -> u64;
    /// Exact kNN by L2 distance over fingerprints; index-only, no payload
    /// I/O. Results ascend by (distance, entry_id) and clamp to the entry
    /// count.
    fn knn_search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>>;
    /// Stored (keys, values) of one entry at one memorized layer.
    fn fetch_layer(&self, entry_id: u64, layer_id: u32) -> Result<(Tensor, Tensor)>;
    fn io_stats(&self) -> IoStats;
}

impl MemorySource for BankHandle {
    fn header(&self) -> &BankHeader {
        self.header()
    }

    fn entry_count(&self) -> u64 {
        self.entry_count()
    }

    fn knn_search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        BankHandle::knn_search(self, query, k)
    }

    fn fetch_layer(&self, entry_id: u64, layer_id: u32) -> Result<(Tensor, Tensor)> {
        self.fetch_payload(entry_id, layer_id)
    }

    fn io_stats(&self) -> IoStats {
        BankHandle::io_stats(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;
    use std::path::PathBuf;

    fn tiny_geometry() -> BankHeader {
        BankHeader::new_geometry(2, vec![0], 1, 1, 2)
    }

    pub(crate) fn make_entry(
        fingerprint: Vec<f32>,
        class_id: u32,
        header: &BankHeader,
        prng: &mut Prng,
    ) -> MemoryEntry {
        let n = header.n_tokens as usize;
        let d = header.d_model as usize;
        let mut layers = Vec::new();
        for _ in &header.layer_ids {
            let keys =
                Tensor::new(vec![n, d], (0..n * d).map(|_| prng.uniform_f32()).collect()).unwrap();
            let values =
                Tensor::new(vec![n, d], (0..n * d).map(|_| prng.uniform_f32()).collect()).unwrap();
            layers.push(LayerKv { keys, values });
        }
        MemoryEntry {
            fingerprint,
            layers,
            class_id,
            source_id: [7; 16],
        }
    }

    fn write_tiny_bank(dir: &std::path::Path, fingerprints: &[Vec<f32>]) -> PathBuf {
        let header = tiny_geometry();
        let mut prng = Prng::new(500);
        let entries: Vec<MemoryEntry> = fingerprints
            .iter()
            .map(|fp| make_entry(fp.clone(), 1, &header, &mut prng))
            .collect();
        let path = dir.join("tiny.msb");
        write_bank(entries, &header, &path).unwrap();
        path
    }

    #[test]
    fn empty_bank_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.msb");
        let header = tiny_geometry();
        write_bank(Vec::new(), &header, &path).unwrap();
        let bank = BankHandle::open(&path).unwrap();
        assert_eq!(bank.entry_count(), 0);
        let stats = bank.io_stats();
        assert_eq!(stats.bytes_read, header.header_size());
        assert_eq!(stats.cache_misses, 0);
    }

    #[test]
    fn file_size_matches_layout_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let header = BankHandle::open(&path).unwrap().header().clone();
        let expected =
            header.header_size() + 2 * header.index_row_size() + 2 * header.payload_size();
        let actual = std::fs::metadata(&path).unwrap().len();
        assert_eq!(actual, expected);
    }

    #[test]
    fn write_then_read_entries_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_geometry();
        let mut prng = Prng::new(9);
        let entries: Vec<MemoryEntry> = (0..4)
            .map(|i| make_entry(vec![i as f32, 1.0 - i as f32], i, &header, &mut prng))
            .collect();
        let path = dir.path().join("rt.msb");
        write_bank(entries.clone(), &header, &path).unwrap();
        let bank = BankHandle::open(&path).unwrap();
        for (i, entry) in entries.iter().enumerate() {
            assert_eq!(bank.index()[i].fingerprint, entry.fingerprint);
            assert_eq!(bank.index()[i].class_id, entry.class_id);
            let (keys, values) = bank.fetch_payload(i as u64, 0).unwrap();
            assert_eq!(keys.data(), entry.layers[0].keys.data());
            assert_eq!(values.data(), entry.layers[0].values.data());
        }
    }

    #[test]
    fn open_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0]]);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = BankHandle::open(&path).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, crate::error::Error::Format { .. }));
        assert!(msg.contains("tiny.msb"), "message was: {msg}");
    }

    #[test]
    fn open_rejects_truncated_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0]]);
        let bytes = std::fs::read(&path).unwrap();
        let header = tiny_geometry();
        std::fs::write(&path, &bytes[..header.header_size() as usize + 3]).unwrap();
        let err = BankHandle::open(&path).unwrap_err();
        assert!(matches!(err, crate::error::Error::Corruption { .. }));
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0]]);
        let header = tiny_geometry();
        let mut bytes = std::fs::read(&path).unwrap();
        let payload_start = (header.header_size() + header.index_row_size()) as usize;
        bytes[payload_start] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let bank = BankHandle::open(&path).unwrap();
        let err = bank.fetch_payload(0, 0).unwrap_err();
        assert!(matches!(
            err,
            crate::error::Error::Corruption { entry_id: 0, .. }
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)] // 0.7071 is the literal example input
    fn knn_hand_worked_example() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(
            dir.path(),
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.7071, 0.7071],
            ],
        );
        let bank = BankHandle::open(&path).unwrap();
        let hits = bank.knn_search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].entry_id, 0);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(hits[1].entry_id, 2);
        assert!((hits[1].distance - 0.7654).abs() < 1e-3);
        // search touched no payload bytes
        assert_eq!(
            bank.io_stats().bytes_read,
            bank.header().header_size() + 3 * bank.header().index_row_size()
        );
    }

    #[test]
    fn knn_k_zero_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let bank = BankHandle::open(&path).unwrap();
        assert!(bank.knn_search(&[0.0, 0.0], 0).unwrap().is_empty());
        let all = bank.knn_search(&[0.0, 0.0], 10).unwrap();
        assert_eq!(all.len(), 2);
    }

    #[test]
    fn knn_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0]]);
        let bank = BankHandle::open(&path).unwrap();
        assert!(bank.knn_search(&[1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn repeat_fetch_is_cache_hit_with_no_extra_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let bank = BankHandle::open(&path).unwrap();
        let before = bank.io_stats().bytes_read;
        bank.fetch_payload(0, 0).unwrap();
        let after_first = bank.io_stats();
        assert_eq!(
            after_first.bytes_read,
            before + bank.header().payload_size()
        );
        bank.fetch_payload(0, 0).unwrap();
        let after_second = bank.io_stats();
        assert_eq!(after_second.bytes_read, after_first.bytes_read);
        assert_eq!(after_second.cache_hits, 1);
        assert_eq!(after_second.cache_misses, 1);
    }

    #[test]
    fn lru_eviction_hand_simulation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(
            dir.path(),
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let bank = BankHandle::open_with_capacity(&path, 2).unwrap();
        for id in [0u64, 1, 2, 0] {
            bank.fetch_payload(id, 0).unwrap();
        }
        let mut resident = bank.resident_entry_ids();
        resident.sort_unstable();
        assert_eq!(resident, vec![0, 2]);
        assert_eq!(bank.eviction_log(), vec![0, 1]);
    }

    #[test]
    fn unknown_layer_is_parameter_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0]]);
        let bank = BankHandle::open(&path).unwrap();
        assert!(matches!(
            bank.fetch_payload(0, 99).unwrap_err(),
            crate::error::Error::Parameter { .. }
        ));
    }

    #[test]
    fn concurrent_fetches_are_safe_and_read_each_entry_once() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_geometry();
        let mut prng = Prng::new(77);
        let entries: Vec<MemoryEntry> = (0..8)
            .map(|i| make_entry(vec![i as f32, 0.0], 0, &header, &mut prng))
            .collect();
        let path = dir.path().join("threads.msb");
        write_bank(entries, &header, &path).unwrap();
        let bank = BankHandle::open(&path).unwrap();
        std::thread::scope(|scope| {
            for t in 0..4 {
                let bank = &bank;
                scope.spawn(move || {
                    for i in 0..100u64 {
                        let id = (i + t) % 8;
                        let (keys, _) = bank.fetch_payload(id, 0).unwrap();
                        assert_eq!(keys.shape(), &[1, 2]);
                    }
                });
            }
        });
        let stats = bank.io_stats();
        // cache holds all 8 entries, so each is read from disk exactly once
        assert_eq!(stats.cache_misses, 8);
        assert_eq!(
            stats.bytes_read,
            header.header_size() + 8 * header.index_row_size() + 8 * header.payload_size()
        );
    }

    #[test]
    fn merge_single_bank_preserves_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tiny_bank(dir.path(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let merged = dir.path().join("merged.msb");
        merge_banks(std::slice::from_ref(&path), &merged).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&merged).unwrap());
    }

    #[test]
    fn merge_concatenates_counts_and_classes() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_geometry();
        let mut prng = Prng::new(31);
        let a = dir.path().join("a.msb");
        let b = dir.path().join("b.msb");
        write_bank(
            vec![make_entry(vec![1.0, 0.0], 1, &header, &mut prng)],
            &header,
            &a,
        )
        .unwrap();
        write_bank(
            vec![
                make_entry(vec![0.0, 1.0], 2, &header, &mut prng),
                make_entry(vec![0.5, 0.5], 2, &header, &mut prng),
            ],
            &header,
            &b,
        )
        .unwrap();
        let merged = dir.path().join("ab.msb");
        merge_banks(&[a, b], &merged).unwrap();
        let bank = BankHandle::open(&merged).unwrap();
        assert_eq!(bank.entry_count(), 3);
        let classes: Vec<u32> = bank.index().iter().map(|r| r.class_id).collect();
        assert_eq!(classes, vec![1, 2, 2]);
    }

    #[test]
    fn merge_rejects_geometry_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut prng = Prng::new(32);
        let h1 = tiny_geometry();
        let h2 = BankHeader::new_geometry(3, vec![0], 1, 1, 2);
        let a = dir.path().join("a.msb");
        let b = dir.path().join("b.msb");
        write_bank(
            vec![make_entry(vec![1.0, 0.0], 1, &h1, &mut prng)],
            &h1,
            &a,
        )
        .unwrap();
        write_bank(
            vec![make_entry(vec![1.0, 0.0, 0.0], 1, &h2, &mut prng)],
            &h2,
            &b,
        )
        .unwrap();
        let err = merge_banks(&[a, b.clone()], &dir.path().join("out.msb")).unwrap_err();
        match err {
            crate::error::Error::Schema { path, .. } => assert_eq!(path, b),
            other => panic!("expected schema error, got {other}"),
        }
    }

    #[test]
    fn bank_set_matches_merged_file() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_geometry();
        let mut prng = Prng::new(33);
        let a = dir.path().join("a.msb");
        let b = dir.path().join("b.msb");
        write_bank(
            vec![
                make_entry(vec![1.0, 0.0], 1, &header, &mut prng),
                make_entry(vec![0.9, 0.1], 1, &header, &mut prng),
            ],
            &header,
            &a,
        )
        .unwrap();
        write_bank(
            vec![make_entry(vec![0.0, 1.0], 2, &header, &mut prng)],
            &header,
            &b,
        )
        .unwrap();
        let merged_path = dir.path().join("m.msb");
        merge_banks(&[a.clone(), b.clone()], &merged_path).unwrap();
        let merged = BankHandle::open(&merged_path).unwrap();
        let set = BankSet::open(&[a, b]).unwrap();
        assert_eq!(set.entry_count(), merged.entry_count());
        for query in [[0.8f32, 0.2], [0.1, 0.9], [0.5, 0.5]] {
            let via_set = MemorySource::knn_search(&set, &query, 3).unwrap();
            let via_merged = merged.knn_search(&query, 3).unwrap();
            assert_eq!(via_set, via_merged);
        }
        // fetch through the set resolves to the right bank
        let (k_set, _) = set.fetch_layer(2, 0).unwrap();
        let (k_merged, _) = merged.fetch_payload(2, 0).unwrap();
        assert_eq!(k_set.data(), k_merged.data());
    }

    #[test]
    fn writer_rejects_geometry_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let header = tiny_geometry();
        let other = BankHeader::new_geometry(3, vec![0], 1, 1, 2);
        let mut prng = Prng::new(34);
        let entry = make_entry(vec![1.0, 0.0, 0.0], 1, &other, &mut prng);
        let err = write_bank(vec![entry], &header, &dir.path().join("x.msb")).unwrap_err();
        assert!(matches!(err, crate::error::Error::Schema { .. }));
    }
}
