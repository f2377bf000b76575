//! On-disk formats: annotations, embeddings, calibration, predictions,
//! checkpoints and run configuration.

mod annotations;
mod calib;
mod checkpoint;
mod config;
mod embeddings;
mod join;
mod predictions;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use annotations::{load_annotations, parse_annotations, write_annotations, AnnotationRecord};
pub use calib::{load_calib, load_calib_dir};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{load_config, parse_config, InputPaths, RunConfig, CONFIG_ENV};
pub use embeddings::{
    load_embeddings, EmbeddingFile, EmbeddingRecord, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use join::{caption_records, eval_samples};
pub use predictions::{load_predictions, parse_predictions, PredictionRecord, PredictionShape};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serializes each item as one JSON line.
pub fn to_jsonl<S: serde::Serialize>(items: &[S]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        let line = serde_json::to_string(it)
            .map_err(|e| Error::Precondition(format!("serialization failed: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
