use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

const LOCK_FILE: &str = ".zssd.lock";

#[derive(Debug)]
pub struct Locked(pub PathBuf);

impl std::fmt::Display for Locked {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} is in use by another zssd process (remove the lock file if it is stale)", self.0.display())
    }
}

impl std::error::Error for Locked {}

/// Exclusive hold on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Create `dir` if needed and take its lock. Unless `force`, the
    /// directory must be empty.
    pub fn acquire(dir: &Path, force: bool) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).map_err(|e| zssd::Error::Io { path: dir.into(), source: e })?;
        let path = dir.join(LOCK_FILE);
        if !force {
            let busy = fs::read_dir(dir)
                .map_err(|e| zssd::Error::Io { path: dir.into(), source: e })?
                .filter_map(|e| e.ok())
                .any(|e| e.file_name() != LOCK_FILE);
            if busy {
                return Err(zssd::Error::Data(format!("{} is not empty; pass --force to write into it", dir.display())).into());
            }
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Locked(path).into()),
            Err(e) => Err(zssd::Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
