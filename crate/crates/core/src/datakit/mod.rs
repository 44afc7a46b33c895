//! Synthetic datasets and on-disk formats.

pub mod checkpoint;
pub mod manifest;
pub mod synthetic;
pub mod tensor_file;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointFile};
pub use manifest::{load_split, write_dataset, DatasetManifest, Modality, Split};
pub use synthetic::{generate_synthetic, ShapeKind, SyntheticData, SyntheticMode, SyntheticSpec};
pub use tensor_file::{decode_tensor, encode_tensor, read_tensor_file, write_tensor_file};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
