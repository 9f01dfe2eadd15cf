//! `EMB1` embedding store.
//!
//! ```text
//! magic "EMB1" | u32 rows | u32 dim | rows × dim f32, little-endian
//! ```
//!
//! The JSONL sidecar has one object per row, in the same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmbeddingRow, EmbeddingTable, WindowPolicy};
use crate::error::{Error, Result};
use crate::frontend::Split;
use crate::io::write_atomic;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    row: usize,
    clip_id: String,
    task_id: String,
    label: String,
    split: Split,
    layer_index: usize,
    window_policy: WindowPolicy,
    #[serde(default)]
    fingerprint: String,
}

pub fn write_store(bin: &Path, manifest: &Path, table: &EmbeddingTable, fingerprint: &str) -> Result<()> {
    let mut out = Vec::with_capacity(12 + table.len() * table.dim * 4);
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    let mut lines = String::new();
    for (i, r) in table.rows.iter().enumerate() {
        if r.vector.len() != table.dim {
            return Err(Error::Store(format!(
                "row {i} ({}) has {} values, store dim {}",
                r.clip_id,
                r.vector.len(),
                table.dim
            )));
        }
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let m = ManifestRow {
            row: i,
            clip_id: r.clip_id.clone(),
            task_id: r.task_id.clone(),
            label: r.label.clone(),
            split: r.split,
            layer_index: r.layer,
            window_policy: r.policy,
            fingerprint: fingerprint.to_string(),
        };
        lines.push_str(&serde_json::to_string(&m)?);
        lines.push('\n');
    }
    write_atomic(bin, &out)?;
    write_atomic(manifest, lines.as_bytes())
}

/// Reads a store and its manifest. With `expected_fingerprint`, every
/// manifest row must carry it.
pub fn read_store(bin: &Path, manifest: &Path, expected_fingerprint: Option<&str>) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(bin)?;
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::Store(format!("{}: not an EMB1 file", bin.display())));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + rows * dim * 4 {
        return Err(Error::Store(format!(
            "{}: {} bytes for {rows}×{dim} rows",
            bin.display(),
            bytes.len()
        )));
    }
    let text = std::fs::read_to_string(manifest)?;
    let entries = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<ManifestRow>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if entries.len() != rows {
        return Err(Error::Store(format!(
            "manifest has {} rows, store has {rows}",
            entries.len()
        )));
    }
    let mut table = EmbeddingTable {
        dim,
        rows: Vec::with_capacity(rows),
    };
    for (i, m) in entries.into_iter().enumerate() {
        if m.row != i {
            return Err(Error::Store(format!("manifest row {i} is labelled {}", m.row)));
        }
        if let Some(fp) = expected_fingerprint {
            if m.fingerprint != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp.to_string(),
                    found: m.fingerprint,
                });
            }
        }
        let off = 12 + i * dim * 4;
        let vector = bytes[off..off + dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        table.rows.push(EmbeddingRow {
            clip_id: m.clip_id,
            task_id: m.task_id,
            label: m.label,
            split: m.split,
            layer: m.layer_index,
            policy: m.window_policy,
            vector,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (bin, man) = (dir.path().join("e.emb"), dir.path().join("e.jsonl"));
        let table = EmbeddingTable {
            dim: 3,
            rows: vec![
                EmbeddingRow {
                    clip_id: "a".into(),
                    task_id: "t".into(),
                    label: "x".into(),
                    split: Split::Train,
                    layer: 0,
                    policy: WindowPolicy::Full,
                    vector: vec![1.0, -2.5, 3.25],
                },
                EmbeddingRow {
                    clip_id: "b".into(),
                    task_id: "t".into(),
                    label: "y".into(),
                    split: Split::Test,
                    layer: 4,
                    policy: WindowPolicy::Chunked(0.5),
                    vector: vec![f32::MIN_POSITIVE, 0.0, 7.0],
                },
            ],
        };
        write_store(&bin, &man, &table, "fp").unwrap();
        let bytes = std::fs::read(&bin).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(bytes.len(), 12 + 2 * 3 * 4);
        assert_eq!(read_store(&bin, &man, Some("fp")).unwrap(), table);
        assert!(matches!(
            read_store(&bin, &man, Some("other")),
            Err(Error::FingerprintMismatch { .. })
        ));
        std::fs::write(&bin, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_store(&bin, &man, None).is_err());
    }
}
