use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::failure::Failure;

const LOCK_NAME: &str = ".mstcar.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    /// Creates `dir` if needed and takes its lockfile.
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::Config(format!(
                "{} is in use by another run (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Config(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
