//! Per-explanation result records and their versioned CSV format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MisureError, Result};

/// Bump MAJOR on breaking column changes; readers reject other majors.
pub const SCHEMA_VERSION: &str = "1.0";

/// One row per (image, class, method) explanation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub schema: String,
    pub image_id: String,
    pub class_id: usize,
    pub method: String,
    /// Hash of the pipeline configuration, excluding filesystem paths.
    pub fingerprint: String,
    pub n_dilations: usize,
    pub dice_explained: f64,
    pub perturbation_ratio: f64,
    /// Wall time of the saliency call alone. Excluded from any
    /// byte-identity comparison.
    pub wall_time_s: f64,
    /// Pixel count of the class prediction on the original image.
    pub prediction_size_px: usize,
    pub saliency_path: String,
    pub prediction_path: String,
}

impl SaliencyRecord {
    pub fn schema_is_supported(&self) -> bool {
        major_version(&self.schema) == major_version(SCHEMA_VERSION)
    }
}

fn major_version(v: &str) -> Option<u32> {
    v.split('.').next()?.parse().ok()
}

/// Canonical record order: image, then class, then method.
pub fn sort_records(records: &mut [SaliencyRecord]) {
    records.sort_by(|a, b| {
        (&a.image_id, a.class_id, &a.method).cmp(&(&b.image_id, b.class_id, &b.method))
    });
}

/// Writes records in canonical order with a header row.
pub fn write_records(path: &Path, records: &[SaliencyRecord]) -> Result<()> {
    crate::io::ensure_parent_dir(path)?;
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| MisureError::io(path.display().to_string(), std::io::Error::other(e)))?;
    for record in &sorted {
        writer
            .serialize(record)
            .map_err(|e| MisureError::Record(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| MisureError::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads records, rejecting rows from an incompatible schema major.
pub fn read_records(path: &Path) -> Result<Vec<SaliencyRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| MisureError::io(path.display().to_string(), std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let record: SaliencyRecord =
            row.map_err(|e| MisureError::Record(format!("{}: {e}", path.display())))?;
        if !record.schema_is_supported() {
            return Err(MisureError::Format {
                path: path.display().to_string(),
                reason: format!(
                    "schema {} is incompatible with reader {}",
                    record.schema, SCHEMA_VERSION
                ),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Hex SHA-256 of the compact JSON encoding. Callers must pass a view of
/// the configuration without filesystem paths so the hash identifies the
/// computation, not the machine layout.
pub fn fingerprint(value: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
