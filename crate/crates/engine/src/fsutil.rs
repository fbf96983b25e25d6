//! Atomic file output and case-id helpers.

use std::io::Write;
use std::path::Path;

use crate::error::{EngineError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(EngineError::io(parent))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(EngineError::io(parent))?;
    tmp.write_all(bytes).map_err(EngineError::io(tmp.path()))?;
    tmp.as_file().sync_all().map_err(EngineError::io(tmp.path()))?;
    tmp.persist(path).map_err(|e| EngineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| EngineError::Invalid(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

const VOLUME_EXTENSIONS: [&str; 2] = [".nii.gz", ".nii"];
const ROLE_SUFFIXES: [&str; 6] = ["_seg", "_truth", "_label", "_pred", "_gt", "_image"];

/// Case id of a volume file: the file name without the NIfTI extension and
/// without one trailing role suffix such as `_image` or `_seg`.
pub fn case_id_of(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let stem = VOLUME_EXTENSIONS.iter().find_map(|ext| name.strip_suffix(ext))?;
    let id = ROLE_SUFFIXES
        .iter()
        .find_map(|s| stem.strip_suffix(s))
        .unwrap_or(stem);
    (!id.is_empty()).then(|| id.to_string())
}

/// NIfTI volumes in `dir`, keyed and sorted by case id.
pub fn volumes_by_case(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(EngineError::io(dir))? {
        let path = entry.map_err(EngineError::io(dir))?.path();
        if path.is_file() {
            if let Some(id) = case_id_of(&path) {
                out.push((id, path));
            }
        }
    }
    out.sort();
    Ok(out)
}
