//! On-disk formats: tensor container, checkpoints, run configuration and
//! netpbm images.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod dataset;
pub mod image;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, load_training_state, save_checkpoint, save_training_state, CheckpointMeta, TrainingState};
pub use config::RunConfig;
pub use container::{Container, Entry, TensorData};
pub use dataset::{load_dataset, save_dataset};

/// Writes `bytes` to a temporary sibling, syncs it, then renames it over
/// `path`, so readers only ever see the old or the complete new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
