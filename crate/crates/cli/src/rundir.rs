//! Per-invocation output directories guarded by a lock file.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};

pub const OUTPUT_ENV: &str = "FLAGSTACK_OUTPUT";
pub const LOCK_FILE: &str = ".lock";

/// A run directory held for the lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Uses `explicit` when given, else `$FLAGSTACK_OUTPUT/<hash>-<millis>`.
    pub fn acquire(explicit: Option<&Path>, config_hash: &str) -> anyhow::Result<RunDir> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
                root.join(format!("{config_hash}-{millis}"))
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("cannot create run directory {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("run directory {} is locked by another invocation", path.display())
            }
            Err(e) => return Err(e).with_context(|| format!("cannot lock {}", path.display())),
        };
        writeln!(f, "{}", std::process::id()).ok();
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: impl AsRef<Path>) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_holder_is_refused_until_release() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let a = RunDir::acquire(Some(&dir), "h").unwrap();
        assert!(dir.join(LOCK_FILE).is_file());
        assert!(RunDir::acquire(Some(&dir), "h").is_err());
        drop(a);
        assert!(!dir.join(LOCK_FILE).exists());
        RunDir::acquire(Some(&dir), "h").unwrap();
    }
}
