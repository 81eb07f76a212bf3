//! Small filesystem helpers shared by the artifact writers.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{RegenError, Result};

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| RegenError::io(dir, e))?;
    }
    Ok(())
}

/// Write through a sibling temporary file and rename it into place, so
/// readers never observe a partially written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = std::fs::File::create(tmp).map_err(|e| RegenError::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| RegenError::io(tmp, e))?;
    f.sync_all().map_err(|e| RegenError::io(tmp, e))?;
    drop(f);
    std::fs::rename(tmp, path).map_err(|e| RegenError::io(path, e))
}

pub(crate) fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| RegenError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RegenError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline, written atomically.
pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RegenError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
