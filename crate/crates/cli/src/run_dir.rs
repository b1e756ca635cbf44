//! Run directories: an exclusive lock for the lifetime of the process and a
//! frozen copy of the resolved config.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult, Classify};

pub const LOCK_FILE: &str = ".lock";
pub const FROZEN_CONFIG: &str = "config.toml";

#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Takes the directory's lock and freezes `config` in it. A directory
    /// that already holds a different frozen config is refused.
    pub fn open(path: &Path, config: &str) -> CliResult<Self> {
        fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::usage(format!("{} is locked by another run ({})", path.display(), lock.display()))
            } else {
                CliError::data(format!("{}: {e}", lock.display()))
            }
        })?;
        let dir = Self { path: path.to_path_buf() };
        writeln!(f, "{}", std::process::id()).or_data()?;

        let frozen = path.join(FROZEN_CONFIG);
        match fs::read_to_string(&frozen) {
            Ok(existing) if existing == config => {}
            Ok(_) => {
                return Err(CliError::usage(format!(
                    "{} was frozen with a different config; use a new run directory",
                    frozen.display()
                )))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&frozen, config).map_err(|e| CliError::data(format!("{}: {e}", frozen.display())))?;
                let mut perms = fs::metadata(&frozen).or_data()?.permissions();
                perms.set_readonly(true);
                fs::set_permissions(&frozen, perms).or_data()?;
            }
            Err(e) => return Err(CliError::data(format!("{}: {e}", frozen.display()))),
        }
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
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
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::open(tmp.path(), "seed = 1\n").unwrap();
        let err = RunDir::open(tmp.path(), "seed = 1\n").unwrap_err();
        assert_eq!(err.kind, crate::error::Kind::Usage);
        drop(a);
        assert!(!tmp.path().join(LOCK_FILE).exists());
        RunDir::open(tmp.path(), "seed = 1\n").unwrap();
    }

    #[test]
    fn frozen_config_is_never_replaced() {
        let tmp = tempfile::tempdir().unwrap();
        drop(RunDir::open(tmp.path(), "seed = 1\n").unwrap());
        assert!(RunDir::open(tmp.path(), "seed = 2\n").is_err());
        assert_eq!(fs::read_to_string(tmp.path().join(FROZEN_CONFIG)).unwrap(), "seed = 1\n");
        assert!(fs::metadata(tmp.path().join(FROZEN_CONFIG)).unwrap().permissions().readonly());
    }
}
