//! Content-addressed cache of processed datasets.
//!
//! Layout: `<cache_dir>/<fingerprint>.dsproc`, one version byte followed by
//! the JSON serialization of the dataset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{fingerprint, DatasetError, ProcessedDataset};

pub const CACHE_FORMAT_VERSION: u8 = 1;

pub fn cache_path(cache_dir: &Path, fingerprint: &str) -> PathBuf {
    cache_dir.join(format!("{fingerprint}.dsproc"))
}

/// Atomic store: write a temp file in the same directory, then rename.
pub fn cache_store(ds: &ProcessedDataset, cache_dir: &Path) -> Result<PathBuf, DatasetError> {
    fs::create_dir_all(cache_dir).map_err(|e| DatasetError::io(cache_dir, e))?;
    let dest = cache_path(cache_dir, &ds.fingerprint);
    let tmp = cache_dir.join(format!(
        ".{}.{}.{}.tmp",
        ds.fingerprint,
        std::process::id(),
        uuid::Uuid::new_v4().simple()
    ));
    let mut bytes = vec![CACHE_FORMAT_VERSION];
    serde_json::to_writer(&mut bytes, ds).expect("datasets serialize");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, &dest)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DatasetError::io(&dest, e)
    })?;
    Ok(dest)
}

/// Returns the cached dataset for `key`, `None` when absent.
///
/// An entry that fails to decode or whose recomputed fingerprint differs
/// from the key is deleted and reported as `CacheCorrupt`.
pub fn cache_lookup(key: &str, cache_dir: &Path) -> Result<Option<ProcessedDataset>, DatasetError> {
    let path = cache_path(cache_dir, key);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(DatasetError::io(&path, e)),
    };
    let corrupt = |reason: String| {
        let _ = fs::remove_file(&path);
        DatasetError::CacheCorrupt {
            path: path.clone(),
            reason,
        }
    };
    match bytes.first() {
        Some(&CACHE_FORMAT_VERSION) => {}
        Some(v) => return Err(corrupt(format!("unknown format version {v}"))),
        None => return Err(corrupt("empty file".into())),
    }
    let ds: ProcessedDataset =
        serde_json::from_slice(&bytes[1..]).map_err(|e| corrupt(format!("decode: {e}")))?;
    let recomputed = fingerprint(&ds);
    if recomputed != key || ds.fingerprint != key {
        return Err(corrupt(format!("fingerprint mismatch: {recomputed}")));
    }
    Ok(Some(ds))
}
