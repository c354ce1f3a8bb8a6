//! Posterior store persistence.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::policy::{PosteriorStore, SnapshotError};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot load {path}: {source}")]
    Load { path: PathBuf, source: SnapshotError },
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn snapshot_state(store: &PosteriorStore, path: &Path) -> Result<(), StateError> {
    write_atomic(path, store.to_json().as_bytes()).map_err(|source| StateError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn restore_state(path: &Path) -> Result<PosteriorStore, StateError> {
    let text = std::fs::read_to_string(path).map_err(|source| StateError::Io {
        path: path.to_owned(),
        source,
    })?;
    PosteriorStore::from_json(&text).map_err(|source| StateError::Load {
        path: path.to_owned(),
        source,
    })
}
