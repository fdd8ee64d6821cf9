//! Run directories: one per invocation, holding the resolved config, a
//! manifest with content hashes of every input and output, and a lock file
//! while the command runs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use flowdistill::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const LOCK_FILE: &str = ".lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    /// Input path -> sha256 of its contents when the command started.
    inputs: &'a BTreeMap<String, String>,
    /// Output file name -> sha256.
    outputs: BTreeMap<String, String>,
}

pub struct RunDir {
    path: PathBuf,
    command: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    lock: Option<PathBuf>,
}

impl RunDir {
    /// `explicit` reuses (or creates) the given directory, otherwise a fresh
    /// `<output_dir>/<command>-<timestamp>-seed<seed>` is created.
    pub fn open(cfg: &RunConfig, command: &str, explicit: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = Path::new(&cfg.output_dir).join(format!("{command}-{stamp}-seed{}", cfg.seed));
                let mut path = base.clone();
                let mut n = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{n}", base.display()));
                    n += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Locked(path.clone()),
                _ => CliError::io(&lock, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&lock, e))?;
        let mut dir = Self {
            path,
            command: command.to_string(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            lock: Some(lock),
        };
        dir.write(CONFIG_FILE, cfg.to_toml_string().as_bytes())?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records the content hash of an input file.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(name);
        Ok(p)
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Writes the manifest and releases the lock.
    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), sha256_file(&self.file(name))?);
        }
        let manifest = Manifest {
            command: &self.command,
            seed: self.seed,
            inputs: &self.inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let p = self.file(MANIFEST_FILE);
        fs::write(&p, text + "\n").map_err(|e| CliError::io(&p, e))?;
        self.release();
        Ok(self.path.clone())
    }

    fn release(&mut self) {
        if let Some(lock) = self.lock.take() {
            let _ = fs::remove_file(lock);
        }
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        self.release();
    }
}

/// Fails if `path` cannot be read; used before any work starts.
pub fn require_file(path: &Path) -> Result<(), CliError> {
    File::open(path).map(|_| ()).map_err(|e| CliError::io(path, e))
}
