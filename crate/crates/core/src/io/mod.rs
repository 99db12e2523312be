//! On-disk artifacts: checkpoints and run reports.

mod checkpoint;
mod report;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use report::{emit_report, parse_csv, render_csv, render_jsonl, ReportError, ReportFormat, ReportRow};

/// Writes `bytes` to a temporary file next to `path`, syncs it, and renames it
/// over `path`, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
