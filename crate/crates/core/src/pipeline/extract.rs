//! Path-safe extraction of injected ZIP archives.
//!
//! Every entry is validated before anything is written, so a single hostile
//! entry aborts the whole extraction with nothing on disk.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Component, Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("archive entry `{entry}` escapes the destination: {reason}")]
    PathEscape { entry: String, reason: &'static str },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("extraction i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Turns an archive entry name into a relative path made only of normal
/// components. Both `/` and `\` count as separators.
pub fn sanitize_entry_name(name: &str) -> Result<PathBuf, ExtractError> {
    let escape = |reason| ExtractError::PathEscape { entry: name.to_string(), reason };
    if name.contains('\0') {
        return Err(escape("embedded NUL"));
    }
    let unified = name.replace('\\', "/");
    if unified.starts_with('/') {
        return Err(escape("absolute path"));
    }
    let bytes = unified.as_bytes();
    if bytes.len() >= 2 && bytes[0].is_ascii_alphabetic() && bytes[1] == b':' {
        return Err(escape("drive-qualified path"));
    }
    let mut rel = PathBuf::new();
    for part in unified.split('/') {
        match part {
            "" | "." => continue,
            ".." => return Err(escape("parent-directory segment")),
            p => rel.push(p),
        }
    }
    // Defer to the platform parser as a second opinion.
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(escape("non-normal path component"));
    }
    Ok(rel)
}

struct Planned {
    rel: PathBuf,
    is_dir: bool,
    data: Vec<u8>,
}

/// Extracts a ZIP archive under `dest`, returning the relative paths of the
/// extracted files in archive order.
pub fn safe_extract(archive: &[u8], dest: &Path) -> Result<Vec<PathBuf>, ExtractError> {
    let mut zip =
        zip::ZipArchive::new(Cursor::new(archive)).map_err(|e| ExtractError::CorruptArchive(e.to_string()))?;
    let mut plan = Vec::with_capacity(zip.len());
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| ExtractError::CorruptArchive(e.to_string()))?;
        let name = String::from_utf8_lossy(entry.name_raw()).into_owned();
        if entry.is_symlink() {
            return Err(ExtractError::PathEscape { entry: name, reason: "symbolic link entry" });
        }
        let rel = sanitize_entry_name(&name)?;
        if rel.as_os_str().is_empty() {
            if entry.is_dir() {
                continue;
            }
            return Err(ExtractError::CorruptArchive(format!("entry `{name}` has no file name")));
        }
        let is_dir = entry.is_dir();
        let mut data = Vec::new();
        if !is_dir {
            entry.read_to_end(&mut data).map_err(|e| ExtractError::CorruptArchive(format!("{name}: {e}")))?;
        }
        plan.push(Planned { rel, is_dir, data });
    }

    fs::create_dir_all(dest)?;
    let root = dest.canonicalize()?;
    let mut written = Vec::new();
    for item in plan {
        let target = root.join(&item.rel);
        if item.is_dir {
            fs::create_dir_all(&target)?;
            ensure_inside(&root, &target, &item.rel)?;
            continue;
        }
        let parent = target.parent().unwrap_or(&root);
        fs::create_dir_all(parent)?;
        // Catches directories inside `dest` that are symlinks pointing out.
        ensure_inside(&root, parent, &item.rel)?;
        if let Ok(meta) = fs::symlink_metadata(&target) {
            if meta.file_type().is_symlink() {
                return Err(ExtractError::PathEscape {
                    entry: item.rel.display().to_string(),
                    reason: "target is an existing symbolic link",
                });
            }
        }
        fs::write(&target, &item.data)?;
        written.push(item.rel);
    }
    Ok(written)
}

fn ensure_inside(root: &Path, p: &Path, rel: &Path) -> Result<(), ExtractError> {
    let canon = p.canonicalize()?;
    if canon.starts_with(root) {
        Ok(())
    } else {
        Err(ExtractError::PathEscape { entry: rel.display().to_string(), reason: "resolves outside destination" })
    }
}
