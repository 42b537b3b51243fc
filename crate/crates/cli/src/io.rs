//! Artifact IO: every file is written to a `.partial` sibling first and
//! renamed into place, so an interrupted run never leaves a truncated file
//! under the final name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliResult, StageCtx};

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn write_atomic(stage: &str, path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).stage(stage)?;
        }
    }
    let partial = partial_path(path);
    fs::write(&partial, bytes).stage(stage)?;
    fs::rename(&partial, path).stage(stage)
}

/// Pretty JSON with a trailing newline; field order is fixed by the types,
/// so identical values serialize byte-identically.
pub fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).stage(stage)?;
    text.push('\n');
    write_atomic(stage, path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(stage: &str, path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::error::CliError::new(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::error::CliError::new(stage, format!("{}: {e}", path.display())))
}
