//! Durable append-only store of pruned-model records.
//!
//! A store directory holds `manifest.txt` (format line, architecture
//! registry, one line per record) and `weights.bin` (concatenated record
//! payloads at the offsets the manifest lists).

mod record;
mod store;

pub use record::{compact_arch, RecordHeader, RecordMeta, ZooRecord};
pub use store::{AppendStage, IntegrityReport, Manifest, ZooStore, FORMAT_HEADER};
