//! File formats and configuration.

pub mod config;
pub mod pnm;
pub mod weights;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::at_path(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::at_path(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::at_path(path, e))?;
    tmp.persist(path).map_err(|e| Error::at_path(path, e.error))?;
    Ok(())
}
