use std::fs::OpenOptions;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fsutil::write_atomic;

pub const LOCK_FILE: &str = ".natsel.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(std::io::Error::new(
                ErrorKind::AlreadyExists,
                format!(
                    "{} exists: another natsel run is using this directory (remove the file if that run died)",
                    path.display()
                ),
            )),
            Err(e) => Err(e),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_file(role: &str, path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::of_bytes(role, path, &bytes))
    }

    pub fn of_bytes(role: &str, path: &Path, bytes: &[u8]) -> Self {
        Self {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

/// Written next to every output as `<output>.manifest.json`. Holds no
/// timestamps so reruns produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub inputs: Vec<FileDigest>,
    pub scorer_id: Option<String>,
    pub config: serde_json::Value,
    pub outputs: Vec<FileDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_prompt_ids: Option<Vec<String>>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            inputs: Vec::new(),
            scorer_id: None,
            config,
            outputs: Vec::new(),
            subset_prompt_ids: None,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        self.inputs.push(FileDigest::of_file(role, path)?);
        Ok(())
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes `bytes` to `path` and the manifest beside it, both atomically.
pub fn write_with_manifest(
    path: &Path,
    bytes: &[u8],
    manifest: &mut Manifest,
) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, bytes)?;
    manifest
        .outputs
        .push(FileDigest::of_bytes("output", path, bytes));
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&manifest_path(path), &json)
}
