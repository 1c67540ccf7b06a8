//! `GZDS` binary dataset format (little-endian).
//!
//! ```text
//! magic "GZDS" | u32 version=1 | u32 n_samples | u32 seq_len=30 | u32 n_feat=24 | u32 n_classes
//! per sample: seq_len*n_feat u8 flags | u8 target | u16 fold | u32 participant_id
//! ```

use std::fmt::Write as _;

use super::{SequenceDataset, SequenceSample, SEQ_LEN, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::scenario::N_FEATURES;

pub const GZDS_MAGIC: &[u8; 4] = b"GZDS";
pub const GZDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const RECORD_LEN: usize = WINDOW_LEN + 1 + 2 + 4;

pub fn write_gzds(ds: &SequenceDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * RECORD_LEN);
    out.extend_from_slice(GZDS_MAGIC);
    for v in [GZDS_VERSION, ds.len() as u32, SEQ_LEN as u32, N_FEATURES as u32, ds.n_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.features);
        out.push(s.target);
        out.extend_from_slice(&s.fold.to_le_bytes());
        out.extend_from_slice(&s.participant_id.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a `GZDS` file. The scenario id is not stored and comes back empty.
pub fn read_gzds(bytes: &[u8]) -> Result<SequenceDataset> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != GZDS_MAGIC {
        return Err(Error::format("not a GZDS file"));
    }
    let version = u32_at(bytes, 4);
    if version != GZDS_VERSION {
        return Err(Error::format(format!("unsupported GZDS version {version}")));
    }
    let n = u32_at(bytes, 8) as usize;
    let (seq_len, n_feat, n_classes) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    if seq_len != SEQ_LEN || n_feat != N_FEATURES {
        return Err(Error::format(format!("expected {SEQ_LEN}x{N_FEATURES} windows, got {seq_len}x{n_feat}")));
    }
    if !(2..=255).contains(&n_classes) {
        return Err(Error::format(format!("bad class count {n_classes}")));
    }
    if bytes.len() != HEADER_LEN + n * RECORD_LEN {
        return Err(Error::format(format!("length {} does not match {n} samples", bytes.len())));
    }
    let mut samples = Vec::with_capacity(n);
    for rec in bytes[HEADER_LEN..].chunks_exact(RECORD_LEN) {
        let features = rec[..WINDOW_LEN].to_vec();
        if features.iter().any(|&b| b > 1) {
            return Err(Error::format("feature flags must be 0 or 1"));
        }
        let target = rec[WINDOW_LEN];
        if target as usize >= n_classes {
            return Err(Error::format(format!("target {target} out of range")));
        }
        let fold = u16::from_le_bytes([rec[WINDOW_LEN + 1], rec[WINDOW_LEN + 2]]);
        let participant_id = u32_at(rec, WINDOW_LEN + 3);
        samples.push(SequenceSample { features, target, participant_id, fold, start: 0 });
    }
    Ok(SequenceDataset { samples, n_classes, scenario_id: String::new() })
}

/// Inspection dump: one row per (sample, frame).
pub fn dataset_to_csv(ds: &SequenceDataset) -> String {
    let mut out = String::from("sample,frame");
    for i in 0..N_FEATURES {
        let _ = write!(out, ",f{i}");
    }
    out.push_str(",target,fold\n");
    for (i, s) in ds.samples.iter().enumerate() {
        for f in 0..SEQ_LEN {
            let _ = write!(out, "{i},{f}");
            for v in s.frame(f) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", s.target, s.fold);
        }
    }
    out
}
