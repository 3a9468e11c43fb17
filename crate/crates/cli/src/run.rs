//! Run directories: output location, resolved config and the writer lock.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub const RUN_ROOT_ENV: &str = "IDL_RUN_ROOT";
pub const CONFIG_FILE: &str = "config.json";
const LOCK_FILE: &str = ".lock";

pub fn default_run_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(command)
}

/// An output directory held for the lifetime of one command. The lock file
/// is created exclusively and removed on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn acquire(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "run directory {} is locked by another writer ({} exists)",
                path.display(),
                lock.display()
            ))),
            Err(e) => Err(CliError::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.join(name);
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Runtime(format!("serializing {name}: {e}")))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
