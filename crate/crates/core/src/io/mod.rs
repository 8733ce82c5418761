//! File formats: images, bitstream container, checkpoints, and the
//! training dataset reader.

mod checkpoint;
mod container;
mod dataset;
mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use container::{Container, CONTAINER_VERSION, HEADER_BYTES, NO_PROMPT};
pub use dataset::{Batch, Dataset};
pub use image::{encode_ppm, parse_ppm, quantize8, read_ppm, write_pgm, write_ppm, Image};

use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
