//! Atomic output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| CliError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

/// An output directory plus the files a command is about to write there.
pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    /// Creates `dir` and refuses to clobber any of `files` unless `overwrite`.
    pub fn prepare(dir: &Path, files: &[&str], overwrite: bool) -> CliResult<Self> {
        Self::check(dir, files, overwrite)?;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    /// The existence check of [`OutputDir::prepare`] without touching disk.
    pub fn check(dir: &Path, files: &[&str], overwrite: bool) -> CliResult<()> {
        if dir.exists() && !dir.is_dir() {
            return Err(CliError::Io(format!("{}: exists and is not a directory", dir.display())));
        }
        if !overwrite {
            if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
                return Err(CliError::Io(format!(
                    "{} already exists; pass --overwrite to replace it",
                    dir.join(f).display()
                )));
            }
        }
        Ok(())
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn write(&self, file: &str, bytes: &[u8]) -> CliResult<()> {
        write_atomic(&self.path(file), bytes)
    }
}
