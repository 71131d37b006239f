//! Triplet manifests: one JSON object per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingBank;
use crate::error::{MeltError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub ref_id: String,
    pub mod_id: String,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rare_truth: Option<bool>,
}

pub type Manifest = Vec<TripletRecord>;

pub fn manifest_to_string(records: &[TripletRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MeltError::data(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn save_manifest(records: &[TripletRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest_to_string(records)?.as_bytes())?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Checks that every id resolves and that each subset contains its target.
/// All missing ids are reported together.
pub fn validate_manifest(
    records: &[TripletRecord],
    reference: &EmbeddingBank,
    modification: &EmbeddingBank,
    target: &EmbeddingBank,
) -> Result<()> {
    let mut missing = Vec::new();
    for r in records {
        if !reference.contains(&r.ref_id) {
            missing.push(r.ref_id.clone());
        }
        if !modification.contains(&r.mod_id) {
            missing.push(r.mod_id.clone());
        }
        if !target.contains(&r.target_id) {
            missing.push(r.target_id.clone());
        }
        if let Some(subset) = &r.subset_ids {
            if !subset.contains(&r.target_id) {
                return Err(MeltError::data(format!("target {} missing from its subset", r.target_id)));
            }
            missing.extend(subset.iter().filter(|id| !target.contains(id)).cloned());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(MeltError::data(format!("unresolved ids: {}", missing.join(", "))));
    }
    Ok(())
}
