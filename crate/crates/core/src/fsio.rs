//! Small file helpers: JSON reading and atomic writes.
//!
//! Writes land in a temporary file next to the destination and are renamed
//! into place, so a crash never leaves a half-written artifact behind.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::PipelineError;

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let display = path.display().to_string();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(&display, e))?;
    }
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(|e| PipelineError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        PipelineError::io(&display, e)
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| PipelineError::json(path.display().to_string(), e))?;
    bytes.push(b'\n');
    write_bytes_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| PipelineError::io(&display, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::json(&display, e))
}
